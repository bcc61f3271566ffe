//! Initial light-up and the SNR prior.
//!
//! Each operation exists twice: a direct implementation on [`Image`] values
//! (used for inspection dumps and as an independent reference) and a
//! differentiable graph version used inside the network.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{Image, LUMA_WEIGHTS};
use crate::params::{Conv, ConvSpec, ParamStore};
use crate::tensor::Tensor;

/// Upper clamp applied to the light-up image before feature extraction.
pub const LIGHT_UP_MAX: f64 = 4.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `v >= tau -> 1`, otherwise `v` is kept.
    #[default]
    Soft,
    /// `v >= tau -> 1`, otherwise 0.
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnrConfig {
    /// Mean-filter window (odd).
    pub kernel: usize,
    pub eps: f64,
    pub tau: f64,
    pub mode: ThresholdMode,
}

impl Default for SnrConfig {
    fn default() -> Self {
        Self {
            kernel: 5,
            eps: 1e-4,
            tau: 0.5,
            mode: ThresholdMode::Soft,
        }
    }
}

impl SnrConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (3..=63).contains(&self.kernel) && self.kernel % 2 == 1,
            InvalidArgument,
            "SNR kernel must be odd and in 3..=63, got {}",
            self.kernel
        );
        ensure!(self.eps > 0.0, InvalidArgument, "SNR eps must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.tau),
            InvalidArgument,
            "tau must lie in [0, 1]"
        );
        Ok(())
    }
}

/// Per-pixel SNR prior: `raw = smooth / max(|gray − smooth|, eps)` and its
/// max-normalized version in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnrMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub raw: Vec<f64>,
}

impl SnrMap {
    pub fn from_normalized(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(data.len() == height * width, ShapeMismatch, "SNR map size");
        ensure!(
            data.iter().all(|v| (0.0..=1.0).contains(v)),
            InvalidArgument,
            "normalized SNR values must lie in [0, 1]"
        );
        Ok(Self {
            height,
            width,
            raw: data.clone(),
            data,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.height, self.width], self.data.clone())
    }
}

/// Per-pixel maximum across the colour channels, row-major `H×W`.
pub fn illumination_prior(img: &Image) -> Vec<f64> {
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    r.iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| r.max(g).max(b))
        .collect()
}

/// Box filter with edge replication, row-major `H×W`.
pub fn mean_filter(values: &[f64], height: usize, width: usize, kernel: usize) -> Vec<f64> {
    let r = (kernel / 2) as isize;
    let norm = (kernel * kernel) as f64;
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, height as isize - 1) as usize;
        let x = x.clamp(0, width as isize - 1) as usize;
        values[y * width + x]
    };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut s = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    s += at(y + dy, x + dx);
                }
            }
            out.push(s / norm);
        }
    }
    out
}

pub fn compute_snr_map(i_lu: &Image, kernel: usize, eps: f64) -> Result<SnrMap> {
    SnrConfig {
        kernel,
        eps,
        ..Default::default()
    }
    .validate()?;
    let (h, w) = (i_lu.height(), i_lu.width());
    let gray = i_lu.grayscale();
    let smooth = mean_filter(&gray, h, w, kernel);
    let raw: Vec<f64> = gray
        .iter()
        .zip(&smooth)
        .map(|(&g, &s)| s / (g - s).abs().max(eps))
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let data = if max > 0.0 {
        raw.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; raw.len()]
    };
    Ok(SnrMap {
        height: h,
        width: w,
        data,
        raw,
    })
}

pub fn threshold_snr(m: &SnrMap, tau: f64, mode: ThresholdMode) -> Result<SnrMap> {
    ensure!(
        (0.0..=1.0).contains(&tau),
        InvalidArgument,
        "tau must lie in [0, 1], got {tau}"
    );
    let data = m
        .data
        .iter()
        .map(|&v| match (v >= tau, mode) {
            (true, _) => 1.0,
            (false, ThresholdMode::Soft) => v,
            (false, ThresholdMode::Binary) => 0.0,
        })
        .collect();
    Ok(SnrMap { data, ..m.clone() })
}

/// 2×2 average pooling; odd trailing rows/columns are replicated first.
pub fn avg_pool2(values: &[f64], height: usize, width: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (height.div_ceil(2), width.div_ceil(2));
    let at = |y: usize, x: usize| values[y.min(height - 1) * width + x.min(width - 1)];
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let s = at(2 * y, 2 * x)
                + at(2 * y, 2 * x + 1)
                + at(2 * y + 1, 2 * x)
                + at(2 * y + 1, 2 * x + 1);
            out.push(s / 4.0);
        }
    }
    (out, oh, ow)
}

/// `L = F(I, max_c I)`: 1×1 conv → depthwise 5×5 → 1×1 conv, no activations.
#[derive(Clone, Debug)]
pub struct IlluminationEstimator {
    pub conv_in: Conv,
    pub depthwise: Conv,
    pub conv_out: Conv,
}

impl IlluminationEstimator {
    /// The output bias starts at 1 so the initial illumination map is close to identity.
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv_in = Conv::new(
            store,
            &format!("{name}.conv_in"),
            ConvSpec::same(4, hidden, 1),
            rng,
        );
        let depthwise = Conv::new(
            store,
            &format!("{name}.depthwise"),
            ConvSpec::depthwise(hidden, 5),
            rng,
        );
        let conv_out = Conv::new(
            store,
            &format!("{name}.conv_out"),
            ConvSpec::same(hidden, 3, 1),
            rng,
        );
        if let Some(b) = conv_out.bias {
            store.get_mut(b).data_mut().fill(1.0);
        }
        Self {
            conv_in,
            depthwise,
            conv_out,
        }
    }

    /// Sets the estimator so that `L ≡ value` for every input.
    pub fn force_constant(&self, store: &mut ParamStore, value: f64) {
        self.conv_out.zero(store);
        if let Some(b) = self.conv_out.bias {
            store.get_mut(b).data_mut().fill(value);
        }
    }

    pub fn illumination(&self, g: &mut Graph, store: &ParamStore, img: Var) -> Var {
        let prior = g.max_channels(img);
        let x = g.concat(&[img, prior]);
        let x = self.conv_in.forward(g, store, x);
        let x = self.depthwise.forward(g, store, x);
        self.conv_out.forward(g, store, x)
    }

    /// Returns `(I_lu, L)` with `I_lu = clamp(I ⊙ L, 0, LIGHT_UP_MAX)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, img: Var) -> Result<(Var, Var)> {
        let l = self.illumination(g, store, img);
        if !g.value(l).is_finite() {
            return Err(Error::NonFinite("illumination"));
        }
        let lit = g.mul(img, l);
        let i_lu = g.clamp(lit, 0.0, LIGHT_UP_MAX);
        Ok((i_lu, l))
    }
}

/// Evaluates the estimator on a single image without recording gradients.
pub fn initial_light_up(
    img: &Image,
    est: &IlluminationEstimator,
    store: &ParamStore,
) -> Result<(Image, Tensor)> {
    let mut g = Graph::inference();
    let x = g.constant(img.to_tensor());
    let (i_lu, l) = est.forward(&mut g, store, x)?;
    Ok((Image::from_tensor(g.value(i_lu))?, g.value(l).clone()))
}

/// Differentiable grayscale of a `3×H×W` tensor.
pub fn gray_graph(g: &mut Graph, img: Var) -> Var {
    let w = g.constant(Tensor::from_parts(vec![1, 3, 1, 1], LUMA_WEIGHTS.to_vec()));
    g.conv2d(img, w, None, 1, 0, 1)
}

/// Differentiable normalized SNR map of a `3×H×W` light-up image, `1×H×W`.
pub fn snr_map_graph(g: &mut Graph, i_lu: Var, cfg: &SnrConfig) -> Var {
    let gray = gray_graph(g, i_lu);
    let r = cfg.kernel / 2;
    let padded = g.replicate_pad(gray, r, r, r, r);
    let k = cfg.kernel;
    let boxk = g.constant(Tensor::full([1, 1, k, k], 1.0 / (k * k) as f64));
    let smooth = g.conv2d(padded, boxk, None, 1, 0, 1);
    let diff = g.sub(gray, smooth);
    let diff = g.abs(diff);
    let den = g.clamp(diff, cfg.eps, f64::INFINITY);
    let raw = g.div(smooth, den);
    let max = g.max_all(raw);
    let max = g.clamp(max, 1e-300, f64::INFINITY);
    g.div_by_scalar_var(raw, max)
}

/// Differentiable 2×2 average pooling of a `1×H×W` map (replicate-padded when odd).
pub fn avg_pool2_graph(g: &mut Graph, m: Var) -> Var {
    let (c, h, w) = g.value(m).dims3();
    let padded = g.replicate_pad(m, 0, h % 2, 0, w % 2);
    let k = g.constant(Tensor::full([c, 1, 2, 2], 0.25));
    g.conv2d(padded, k, None, 2, 0, c)
}

pub fn threshold_graph(g: &mut Graph, m: Var, cfg: &SnrConfig) -> Var {
    g.threshold(m, cfg.tau, cfg.mode == ThresholdMode::Binary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    #[test]
    fn prior_is_channel_max() {
        let mut img = Image::filled(1, 2, 0.0);
        img.set(0, 0, 0, 0.2);
        img.set(1, 0, 0, 0.5);
        img.set(2, 0, 0, 0.1);
        assert_eq!(illumination_prior(&img), vec![0.5, 0.0]);
        let gray = Image::filled(3, 3, 0.42);
        assert!(illumination_prior(&gray).iter().all(|&v| v == 0.42));
    }

    #[test]
    fn identity_and_scalar_illumination() {
        let mut store = ParamStore::new();
        let est = IlluminationEstimator::new(&mut store, "illum", 16, &mut rng());
        let img = Image::from_fn(6, 5, |c, y, x| ((c + y + x) % 7) as f64 / 7.0);
        est.force_constant(&mut store, 1.0);
        let (lu, l) = initial_light_up(&img, &est, &store).unwrap();
        assert_eq!(lu, img);
        assert!(l.data().iter().all(|&v| v == 1.0));

        est.force_constant(&mut store, 2.0);
        let (lu, _) = initial_light_up(&Image::filled(4, 4, 0.3), &est, &store).unwrap();
        assert!(lu.data().iter().all(|&v| v == 0.6));
    }

    #[test]
    fn light_up_matches_elementwise_oracle() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let est = IlluminationEstimator::new(&mut store, "illum", 4, &mut r);
        let img = Image::from_fn(7, 6, |_, _, _| 0.0);
        let img = img.map(|_| r.random_range(0.0..1.0));
        let (lu, l) = initial_light_up(&img, &est, &store).unwrap();

        // Oracle: evaluate the three convolutions with nested loops.
        let (h, w) = (7usize, 6usize);
        let p = |name: &str| store.get(store.id(name).unwrap()).data().to_vec();
        let (w_in, b_in) = (p("illum.conv_in.weight"), p("illum.conv_in.bias"));
        let (w_dw, b_dw) = (p("illum.depthwise.weight"), p("illum.depthwise.bias"));
        let (w_out, b_out) = (p("illum.conv_out.weight"), p("illum.conv_out.bias"));
        let prior = illumination_prior(&img);
        let input = |c: usize, y: usize, x: usize| {
            if c < 3 {
                img.get(c, y, x)
            } else {
                prior[y * w + x]
            }
        };
        let mut hid = vec![0.0; 4 * h * w];
        for o in 0..4 {
            for y in 0..h {
                for x in 0..w {
                    hid[(o * h + y) * w + x] = b_in[o]
                        + (0..4)
                            .map(|c| w_in[o * 4 + c] * input(c, y, x))
                            .sum::<f64>();
                }
            }
        }
        let mut dw = vec![0.0; 4 * h * w];
        for o in 0..4 {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut s = b_dw[o];
                    for ky in 0..5isize {
                        for kx in 0..5isize {
                            let (iy, ix) = (y + ky - 2, x + kx - 2);
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                s += w_dw[(o * 5 + ky as usize) * 5 + kx as usize]
                                    * hid[(o * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    dw[(o * h + y as usize) * w + x as usize] = s;
                }
            }
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let lv = b_out[c]
                        + (0..4)
                            .map(|o| w_out[c * 4 + o] * dw[(o * h + y) * w + x])
                            .sum::<f64>();
                    let i = (c * h + y) * w + x;
                    assert!((l.data()[i] - lv).abs() < 1e-12);
                    let expect = (img.get(c, y, x) * lv).clamp(0.0, LIGHT_UP_MAX);
                    assert!((lu.get(c, y, x) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_finite_illumination_is_rejected() {
        let mut store = ParamStore::new();
        let est = IlluminationEstimator::new(&mut store, "illum", 4, &mut rng());
        est.force_constant(&mut store, f64::NAN);
        assert!(matches!(
            initial_light_up(&Image::filled(3, 3, 0.5), &est, &store),
            Err(Error::NonFinite("illumination"))
        ));
    }

    #[test]
    fn constant_image_snr() {
        let m = compute_snr_map(&Image::filled(6, 6, 0.4), 5, 1e-4).unwrap();
        assert!(m.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(m.raw.iter().all(|&v| (v - 0.4 / 1e-4).abs() < 1e-6));
        let z = compute_snr_map(&Image::filled(6, 6, 0.0), 5, 1e-4).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_snr_hand_value() {
        let mut img = Image::filled(5, 5, 0.0);
        for c in 0..3 {
            img.set(c, 2, 2, 1.0);
        }
        let m = compute_snr_map(&img, 3, 1e-4).unwrap();
        // smooth = 1/9, |1 − 1/9| = 8/9
        assert!((m.raw[2 * 5 + 2] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn snr_rejects_bad_kernel() {
        let img = Image::filled(4, 4, 0.5);
        assert!(compute_snr_map(&img, 4, 1e-4).is_err());
        assert!(compute_snr_map(&img, 1, 1e-4).is_err());
        assert!(compute_snr_map(&img, 3, 0.0).is_err());
    }

    #[test]
    fn thresholds() {
        let m = SnrMap::from_normalized(1, 2, vec![0.2, 0.6]).unwrap();
        assert_eq!(
            threshold_snr(&m, 0.5, ThresholdMode::Binary).unwrap().data,
            vec![0.0, 1.0]
        );
        assert_eq!(
            threshold_snr(&m, 0.0, ThresholdMode::Soft).unwrap().data,
            vec![1.0, 1.0]
        );
        let peak = SnrMap::from_normalized(1, 3, vec![0.3, 1.0, 0.7]).unwrap();
        assert_eq!(
            threshold_snr(&peak, 1.0, ThresholdMode::Soft).unwrap().data,
            vec![0.3, 1.0, 0.7]
        );
        let once = threshold_snr(&peak, 0.5, ThresholdMode::Binary).unwrap();
        assert_eq!(
            threshold_snr(&once, 0.5, ThresholdMode::Binary).unwrap(),
            once
        );
        assert!(threshold_snr(&m, 1.5, ThresholdMode::Soft).is_err());
    }

    #[test]
    fn noise_lowers_median_snr() {
        use rand_distr::{Distribution, Normal};
        let smooth = Image::from_fn(32, 32, |c, y, x| {
            0.3 + 0.2 * ((x as f64 / 9.0).sin() * (y as f64 / 11.0).cos()) + 0.02 * c as f64
        });
        let median = |v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s[s.len() / 2]
        };
        let clean = median(&compute_snr_map(&smooth, 5, 1e-4).unwrap().raw);
        for seed in 0..5 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, 0.05).unwrap();
            let noisy = smooth.map(|v| v + n.sample(&mut r));
            let m = median(&compute_snr_map(&noisy, 5, 1e-4).unwrap().raw);
            assert!(m < clean, "seed {seed}: {m} !< {clean}");
        }
    }

    #[test]
    fn mean_filter_preserves_interior_mean_of_linear_ramp() {
        let (h, w) = (9, 9);
        let v: Vec<f64> = (0..h * w)
            .map(|i| (i % w) as f64 + 2.0 * (i / w) as f64)
            .collect();
        let f = mean_filter(&v, h, w, 3);
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                assert!((f[y * w + x] - v[y * w + x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_snr_matches_direct_route() {
        let mut r = rng();
        let img = Image::filled(9, 7, 0.0).map(|_| r.random_range(0.0..1.5));
        let cfg = SnrConfig::default();
        let direct = compute_snr_map(&img, cfg.kernel, cfg.eps).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(img.to_tensor());
        let m = snr_map_graph(&mut g, x, &cfg);
        for (a, b) in g.value(m).data().iter().zip(&direct.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let pooled = avg_pool2_graph(&mut g, m);
        let (oracle, oh, ow) = avg_pool2(&direct.data, 9, 7);
        assert_eq!(g.shape(pooled), &[1, oh, ow]);
        for (a, b) in g.value(pooled).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let th = threshold_graph(&mut g, m, &cfg);
        let direct_th = threshold_snr(&direct, cfg.tau, cfg.mode).unwrap();
        for (a, b) in g.value(th).data().iter().zip(&direct_th.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn normalized_snr_in_unit_interval(seed in proptest::prelude::any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let img = Image::filled(8, 8, 0.0).map(|_| r.random_range(0.0..1.0));
            let m = compute_snr_map(&img, 3, 1e-4).unwrap();
            proptest::prop_assert!(m.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
