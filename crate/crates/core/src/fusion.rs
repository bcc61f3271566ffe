//! Holistic-regional fusion branch and the assembled enhancement network.
//!
//! Encoder and decoder run over three scales (see [`crate::selection`] for
//! the scale convention); a convolutional GRU carries temporal state at the
//! quarter-resolution bottleneck.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::event::{VoxelGrid, VoxelNorm, DEFAULT_BINS};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::params::{constant_param, Conv, ConvSpec, Deconv, ParamId, ParamStore};
use crate::preprocessing::{
    avg_pool2_graph, snr_map_graph, threshold_graph, IlluminationEstimator, SnrConfig, SnrMap,
};
use crate::selection::{
    erfs_graph, irfs_graph, Pyramid, SelectionBranch, ShallowExtractor, SCALES,
};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const QK_NORM_EPS: f64 = 1e-12;

/// Order in which HRF concatenates its three inputs. Only one order exists;
/// it is stored so checkpoints state it explicitly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcatOrder {
    #[default]
    ImgEvHolistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvLightConfig {
    /// Base width `C`; scales carry `C`, `2C` and `4C` channels.
    pub channels: usize,
    pub bins: usize,
    pub illumination_hidden: usize,
    /// Attention heads per scale, indexed like the scales (quarter, half, full).
    pub heads: [usize; SCALES],
    /// FFN hidden width as a multiple of the block width.
    pub ffn_expansion: usize,
    pub eca_kernel: usize,
    pub leaky_slope: f64,
    pub gru_kernel: usize,
    pub snr: SnrConfig,
    pub voxel_norm: VoxelNorm,
    pub concat_order: ConcatOrder,
    pub use_gru: bool,
    pub use_irfs: bool,
    pub use_erfs: bool,
    pub use_events: bool,
    /// Replace every SNR mask with ones.
    pub ones_mask: bool,
    pub seed: u64,
}

impl Default for EvLightConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            bins: DEFAULT_BINS,
            illumination_hidden: 16,
            heads: [4, 2, 1],
            ffn_expansion: 2,
            eca_kernel: 3,
            leaky_slope: 0.2,
            gru_kernel: 3,
            snr: SnrConfig::default(),
            voxel_norm: VoxelNorm::None,
            concat_order: ConcatOrder::ImgEvHolistic,
            use_gru: true,
            use_irfs: true,
            use_erfs: true,
            use_events: true,
            ones_mask: false,
            seed: 0,
        }
    }
}

impl EvLightConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v, max) in [
            ("channels", self.channels, 4096),
            ("bins", self.bins, 4096),
            ("illumination_hidden", self.illumination_hidden, 4096),
            ("ffn_expansion", self.ffn_expansion, 16),
        ] {
            ensure!(
                (1..=max).contains(&v),
                InvalidArgument,
                "{name} must lie in 1..={max}, got {v}"
            );
        }
        for (name, k) in [
            ("eca_kernel", self.eca_kernel),
            ("gru_kernel", self.gru_kernel),
        ] {
            ensure!(
                k % 2 == 1 && k <= 15,
                InvalidArgument,
                "{name} must be odd and at most 15"
            );
        }
        ensure!(
            self.leaky_slope.is_finite(),
            InvalidArgument,
            "leaky_slope must be finite"
        );
        self.snr.validate()?;
        for (scale, &h) in self.heads.iter().enumerate() {
            let width = self.encoder_width(scale);
            ensure!(
                h > 0 && width.is_multiple_of(h) && self.decoder_width(scale).is_multiple_of(h),
                InvalidArgument,
                "{h} heads do not divide the width at scale {scale}"
            );
        }
        Ok(())
    }

    /// Holistic width at `scale` in the decoder (and of the selected features).
    pub fn decoder_width(&self, scale: usize) -> usize {
        self.channels << (SCALES - 1 - scale)
    }

    /// Encoder width: `2C` at full and half resolution, `4C` at the bottleneck.
    pub fn encoder_width(&self, scale: usize) -> usize {
        if scale == 0 {
            4 * self.channels
        } else {
            2 * self.channels
        }
    }
}

/// Channel-wise (transposed) multi-head self-attention followed by a gated FFN.
#[derive(Clone, Debug)]
pub struct Hfe {
    pub channels: usize,
    pub heads: usize,
    pub hidden: usize,
    pub qkv: Conv,
    pub temperature: ParamId,
    pub project: Conv,
    pub ln_weight: ParamId,
    pub ln_bias: ParamId,
    pub ffn_in: Conv,
    pub ffn_dw: Conv,
    pub ffn_out: Conv,
}

impl Hfe {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        expansion: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = channels * expansion;
        Self {
            channels,
            heads,
            hidden,
            qkv: Conv::new(
                store,
                &format!("{name}.qkv"),
                ConvSpec::same(channels, 3 * channels, 1),
                rng,
            ),
            temperature: constant_param(store, &format!("{name}.temperature"), &[heads], 1.0),
            project: Conv::new(
                store,
                &format!("{name}.project"),
                ConvSpec::same(channels, channels, 1),
                rng,
            ),
            ln_weight: constant_param(store, &format!("{name}.ln.weight"), &[channels], 1.0),
            ln_bias: constant_param(store, &format!("{name}.ln.bias"), &[channels], 0.0),
            ffn_in: Conv::new(
                store,
                &format!("{name}.ffn_in"),
                ConvSpec::same(channels, 2 * hidden, 1),
                rng,
            ),
            ffn_dw: Conv::new(
                store,
                &format!("{name}.ffn_dw"),
                ConvSpec::depthwise(2 * hidden, 3),
                rng,
            ),
            ffn_out: Conv::new(
                store,
                &format!("{name}.ffn_out"),
                ConvSpec::same(hidden, channels, 1),
                rng,
            ),
        }
    }

    pub fn attention(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (c, h, w) = g.value(x).dims3();
        let hw = h * w;
        let per = c / self.heads;
        let qkv = self.qkv.forward(g, store, x);
        let temp = g.param(store, self.temperature);
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = g.narrow(qkv, head * per, per);
            let k = g.narrow(qkv, c + head * per, per);
            let v = g.narrow(qkv, 2 * c + head * per, per);
            let q = g.reshape(q, &[per, hw]);
            let k = g.reshape(k, &[per, hw]);
            let v = g.reshape(v, &[per, hw]);
            let q = g.l2_normalize_rows(q, QK_NORM_EPS);
            let k = g.l2_normalize_rows(k, QK_NORM_EPS);
            let kt = g.transpose(k);
            let logits = g.matmul(q, kt);
            let t = g.narrow(temp, head, 1);
            let logits = g.mul_by_scalar_var(logits, t);
            let attn = g.softmax_rows(logits);
            outs.push(g.matmul(attn, v));
        }
        let y = g.concat(&outs);
        let y = g.reshape(y, &[c, h, w]);
        self.project.forward(g, store, y)
    }

    pub fn ffn(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let hidden = self.hidden;
        let y = self.ffn_in.forward(g, store, x);
        let y = self.ffn_dw.forward(g, store, y);
        let a = g.narrow(y, 0, hidden);
        let b = g.narrow(y, hidden, hidden);
        let a = g.gelu(a);
        let y = g.mul(a, b);
        self.ffn_out.forward(g, store, y)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let a = self.attention(g, store, x);
        let mid = g.add(a, x);
        let lw = g.param(store, self.ln_weight);
        let lb = g.param(store, self.ln_bias);
        let normed = g.layer_norm_channels(mid, lw, lb, LN_EPS);
        let f = self.ffn(g, store, normed);
        g.add(f, mid)
    }
}

/// `F3(σ(F1(cat)) ⊙ F2(cat) + cat)` over `cat = [img, ev, holistic]`.
#[derive(Clone, Debug)]
pub struct Hrf {
    pub f1: Conv,
    pub f2: Conv,
    pub f3: Conv,
}

impl Hrf {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let cat = 3 * width;
        Self {
            f1: Conv::new(store, &format!("{name}.f1"), ConvSpec::same(cat, 1, 3), rng),
            f2: Conv::new(
                store,
                &format!("{name}.f2"),
                ConvSpec::same(cat, cat, 3),
                rng,
            ),
            f3: Conv::new(
                store,
                &format!("{name}.f3"),
                ConvSpec::same(cat, width, 3),
                rng,
            ),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        img: Var,
        ev: Var,
        holistic: Var,
    ) -> Var {
        let cat = g.concat(&[img, ev, holistic]);
        let logits = self.f1.forward(g, store, cat);
        let gate = g.sigmoid(logits);
        let feats = self.f2.forward(g, store, cat);
        let gated = g.mul_spatial(feats, gate);
        let sum = g.add(gated, cat);
        self.f3.forward(g, store, sum)
    }
}

#[derive(Clone, Debug)]
pub struct ConvGru {
    pub update: Conv,
    pub reset: Conv,
    pub candidate: Conv,
}

impl ConvGru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            update: Conv::new(
                store,
                &format!("{name}.update"),
                ConvSpec::same(2 * width, width, k),
                rng,
            ),
            reset: Conv::new(
                store,
                &format!("{name}.reset"),
                ConvSpec::same(2 * width, width, k),
                rng,
            ),
            candidate: Conv::new(
                store,
                &format!("{name}.candidate"),
                ConvSpec::same(2 * width, width, k),
                rng,
            ),
        }
    }

    /// One recurrence step; returns the new state, which is also the output feature.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var, prev: Option<Var>) -> Var {
        let s = match prev {
            Some(s) => s,
            None => {
                let shape = g.shape(f).to_vec();
                g.constant(Tensor::zeros(shape))
            }
        };
        let fs = g.concat(&[f, s]);
        let z = self.update.forward(g, store, fs);
        let z = g.sigmoid(z);
        let r = self.reset.forward(g, store, fs);
        let r = g.sigmoid(r);
        let rs = g.mul(r, s);
        let frs = g.concat(&[f, rs]);
        let h = self.candidate.forward(g, store, frs);
        let h = g.tanh(h);
        let keep = g.one_minus(z);
        let old = g.mul(keep, s);
        let new = g.mul(z, h);
        g.add(old, new)
    }
}

/// Recurrent state carried between frames of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct GruState {
    pub hidden: Tensor,
    /// Number of frames processed so far.
    pub frame: usize,
}

/// Graph handles produced by [`EvLight::forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Unclamped `head + I_lu`.
    pub enhanced: Var,
    pub state: Option<Var>,
    pub light_up: Var,
    /// Normalized full-resolution SNR map before thresholding.
    pub snr: Var,
    /// Thresholded masks per scale.
    pub masks: [Var; SCALES],
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Unclamped; use [`Image::clamped`] for evaluation.
    pub enhanced: Image,
    pub state: GruState,
    pub light_up: Image,
    pub snr: SnrMap,
}

#[derive(Clone, Debug)]
pub struct EvLight {
    pub config: EvLightConfig,
    pub params: ParamStore,
    pub illumination: IlluminationEstimator,
    pub shallow: ShallowExtractor,
    pub image_pyramid: Pyramid,
    pub event_pyramid: Pyramid,
    pub irfs: Option<[SelectionBranch; SCALES]>,
    pub erfs: Option<[SelectionBranch; SCALES]>,
    pub encoder: [Hfe; 2],
    pub encoder_down: [Conv; 2],
    pub hrf: [Hrf; SCALES],
    pub gru: Option<ConvGru>,
    pub decoder: [Hfe; 2],
    pub decoder_up: [Deconv; 2],
    pub head: Conv,
}

fn stage(g: &Graph, vars: &[Var], name: &'static str) -> Result<()> {
    if vars.iter().all(|&v| g.value(v).is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name))
    }
}

impl EvLight {
    pub fn new(config: EvLightConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let c = config.channels;
        let branches =
            |s: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| -> [SelectionBranch; SCALES] {
                std::array::from_fn(|scale| {
                    SelectionBranch::new(
                        s,
                        &format!("{prefix}{scale}"),
                        config.decoder_width(scale),
                        config.eca_kernel,
                        config.leaky_slope,
                        rng,
                    )
                })
            };
        let illumination = IlluminationEstimator::new(s, "illum", config.illumination_hidden, rng);
        let shallow = ShallowExtractor::new(s, "shallow", config.bins, c, rng);
        let image_pyramid = Pyramid::new(s, "pyr_img", c, rng);
        let event_pyramid = Pyramid::new(s, "pyr_ev", c, rng);
        let irfs = config.use_irfs.then(|| branches(s, "irfs", rng));
        let erfs = config.use_erfs.then(|| branches(s, "erfs", rng));
        let encoder = [
            Hfe::new(
                s,
                "enc2.hfe",
                2 * c,
                config.heads[2],
                config.ffn_expansion,
                rng,
            ),
            Hfe::new(
                s,
                "enc1.hfe",
                2 * c,
                config.heads[1],
                config.ffn_expansion,
                rng,
            ),
        ];
        let encoder_down = [
            Conv::new(s, "enc2.down", ConvSpec::down(2 * c, 2 * c), rng),
            Conv::new(s, "enc1.down", ConvSpec::down(2 * c, 4 * c), rng),
        ];
        let hrf = std::array::from_fn(|scale| {
            Hrf::new(s, &format!("hrf{scale}"), config.decoder_width(scale), rng)
        });
        let gru = config
            .use_gru
            .then(|| ConvGru::new(s, "gru", 4 * c, config.gru_kernel, rng));
        let decoder = [
            Hfe::new(
                s,
                "dec0.hfe",
                4 * c,
                config.heads[0],
                config.ffn_expansion,
                rng,
            ),
            Hfe::new(
                s,
                "dec1.hfe",
                2 * c,
                config.heads[1],
                config.ffn_expansion,
                rng,
            ),
        ];
        let decoder_up = [
            Deconv::new(s, "dec0.up", 4 * c, 2 * c, rng),
            Deconv::new(s, "dec1.up", 2 * c, c, rng),
        ];
        let head = Conv::new(s, "head", ConvSpec::same(c, 3, 3), rng);
        Ok(Self {
            config,
            params: store,
            illumination,
            shallow,
            image_pyramid,
            event_pyramid,
            irfs,
            erfs,
            encoder,
            encoder_down,
            hrf,
            gru,
            decoder,
            decoder_up,
            head,
        })
    }

    /// Shape of the recurrent state for an `h×w` input.
    pub fn state_shape(&self, h: usize, w: usize) -> [usize; 3] {
        [4 * self.config.channels, h / 4, w / 4]
    }

    fn check_inputs(&self, img: &[usize], voxels: &[usize], state: Option<&[usize]>) -> Result<()> {
        ensure!(
            img.len() == 3 && img[0] == 3,
            ShapeMismatch,
            "expected a 3xHxW image, got {img:?}"
        );
        let (h, w) = (img[1], img[2]);
        ensure!(
            h >= 4 && w >= 4 && h % 4 == 0 && w % 4 == 0,
            InvalidArgument,
            "input size {h}x{w} must be a positive multiple of 4"
        );
        ensure!(
            voxels == [self.config.bins, h, w],
            ShapeMismatch,
            "voxel grid {voxels:?} does not match {} bins at {h}x{w}",
            self.config.bins
        );
        if let Some(s) = state {
            let expected = self.state_shape(h, w);
            ensure!(
                s == expected,
                ShapeMismatch,
                "state shape {s:?}, expected {expected:?}"
            );
        }
        Ok(())
    }

    /// Applies the configured voxel normalization and event ablation.
    pub fn prepare_voxels(&self, voxels: &Tensor) -> Tensor {
        if !self.config.use_events {
            return Tensor::zeros(voxels.shape().to_vec());
        }
        match self.config.voxel_norm {
            VoxelNorm::None => voxels.clone(),
            VoxelNorm::MaxAbs => {
                let m = voxels.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if m > 0.0 {
                    voxels.map(|v| v / m)
                } else {
                    voxels.clone()
                }
            }
        }
    }

    /// Records one frame's forward pass on `g`. `voxels` holds raw voxel values.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        img: Var,
        voxels: &Tensor,
        state: Option<Var>,
    ) -> Result<ForwardVars> {
        self.check_inputs(g.shape(img), voxels.shape(), state.map(|s| g.shape(s)))?;
        let cfg = &self.config;
        let (i_lu, _) = self.illumination.forward(g, store, img)?;
        stage(g, &[i_lu], "light_up")?;

        let snr = snr_map_graph(g, i_lu, &cfg.snr);
        stage(g, &[snr], "snr_map")?;
        let mut pooled = [snr; SCALES];
        for scale in (0..SCALES - 1).rev() {
            pooled[scale] = avg_pool2_graph(g, pooled[scale + 1]);
        }
        let masks: [Var; SCALES] = std::array::from_fn(|scale| {
            if cfg.ones_mask {
                let shape = g.shape(pooled[scale]).to_vec();
                g.constant(Tensor::full(shape, 1.0))
            } else {
                threshold_graph(g, pooled[scale], &cfg.snr)
            }
        });

        let ev = g.constant(self.prepare_voxels(voxels));
        let (f_img, f_ev) = self.shallow.forward(g, store, i_lu, ev);
        stage(g, &[f_img, f_ev], "shallow")?;
        let img_pyr = self.image_pyramid.forward(g, store, f_img);
        let ev_pyr = self.event_pyramid.forward(g, store, f_ev);
        let sel_img: [Var; SCALES] = std::array::from_fn(|i| match &self.irfs {
            Some(b) => irfs_graph(g, store, &b[i], img_pyr[i], masks[i]),
            None => img_pyr[i],
        });
        let sel_ev: [Var; SCALES] = std::array::from_fn(|i| match &self.erfs {
            Some(b) => erfs_graph(g, store, &b[i], ev_pyr[i], masks[i]),
            None => ev_pyr[i],
        });
        stage(g, &[sel_img, sel_ev].concat(), "selection")?;

        let mut x = g.concat(&[f_img, f_ev]);
        for (hfe, down) in self.encoder.iter().zip(&self.encoder_down) {
            x = hfe.forward(g, store, x);
            x = down.forward(g, store, x);
        }
        stage(g, &[x], "encoder")?;

        let mut x = self.hrf[0].forward(g, store, sel_img[0], sel_ev[0], x);
        let new_state = match &self.gru {
            Some(gru) => {
                x = gru.forward(g, store, x, state);
                stage(g, &[x], "gru")?;
                Some(x)
            }
            None => state,
        };

        for i in 0..2 {
            x = self.decoder[i].forward(g, store, x);
            x = self.decoder_up[i].forward(g, store, x);
            x = self.hrf[i + 1].forward(g, store, sel_img[i + 1], sel_ev[i + 1], x);
        }
        stage(g, &[x], "decoder")?;

        let residual = self.head.forward(g, store, x);
        let enhanced = g.add(residual, i_lu);
        stage(g, &[enhanced], "head")?;
        Ok(ForwardVars {
            enhanced,
            state: new_state,
            light_up: i_lu,
            snr,
            masks,
        })
    }

    /// Inference on one frame; pass the returned state to the next frame.
    pub fn forward(
        &self,
        img: &Image,
        grid: &VoxelGrid,
        state: Option<&GruState>,
    ) -> Result<ForwardOutput> {
        let mut g = Graph::inference();
        let x = g.constant(img.to_tensor());
        let s = state.map(|s| g.constant(s.hidden.clone()));
        let out = self.forward_graph(&mut g, &self.params, x, grid.data(), s)?;
        let hidden = match out.state {
            Some(v) => g.value(v).clone(),
            None => Tensor::zeros(self.state_shape(img.height(), img.width()).to_vec()),
        };
        let snr = g.value(out.snr);
        Ok(ForwardOutput {
            enhanced: Image::from_tensor(g.value(out.enhanced))?,
            state: GruState {
                hidden,
                frame: state.map_or(0, |s| s.frame) + 1,
            },
            light_up: Image::from_tensor(g.value(out.light_up))?,
            snr: SnrMap::from_normalized(img.height(), img.width(), snr.data().to_vec())?,
        })
    }
}

/// Exact parameter count and multiply-accumulate count at 256×256.
pub fn count_params_flops(config: &EvLightConfig) -> Result<(u64, u64)> {
    let (params, macs) = count_layers(config, 256, 256)?;
    Ok((params, macs))
}

/// Walks the architecture analytically. MACs include the fixed filters of
/// the SNR prior and the attention matrix products.
pub fn count_layers(config: &EvLightConfig, h: usize, w: usize) -> Result<(u64, u64)> {
    config.validate()?;
    ensure!(
        h.is_multiple_of(4) && w.is_multiple_of(4),
        InvalidArgument,
        "size must be a multiple of 4"
    );
    let mut params = 0u64;
    let mut macs = 0u64;
    let mut conv = |spec: ConvSpec, ih: usize, iw: usize| {
        let oh = (ih + 2 * spec.pad - spec.k) / spec.stride + 1;
        let ow = (iw + 2 * spec.pad - spec.k) / spec.stride + 1;
        params += spec.param_count() as u64;
        macs += (spec.cout * (spec.cin / spec.groups) * spec.k * spec.k * oh * ow) as u64;
    };
    let c = config.channels;
    let size = |scale: usize| (h >> (SCALES - 1 - scale), w >> (SCALES - 1 - scale));
    let mut extra_params = 0u64;
    let mut extra_macs = 0u64;

    // illumination estimator
    let hid = config.illumination_hidden;
    conv(ConvSpec::same(4, hid, 1), h, w);
    conv(ConvSpec::depthwise(hid, 5), h, w);
    conv(ConvSpec::same(hid, 3, 1), h, w);

    // SNR prior: grayscale, box filter, two 2x2 poolings
    let k = config.snr.kernel;
    extra_macs += (3 * h * w + k * k * h * w) as u64;
    extra_macs += (4 * size(1).0 * size(1).1 + 4 * size(0).0 * size(0).1) as u64;

    conv(ConvSpec::same(3, c, 3), h, w);
    conv(ConvSpec::same(config.bins, c, 3), h, w);
    for _ in 0..2 {
        conv(ConvSpec::down(c, 2 * c), h, w);
        conv(ConvSpec::down(2 * c, 4 * c), h / 2, w / 2);
    }

    let n_branches = config.use_irfs as usize + config.use_erfs as usize;
    for scale in 0..SCALES {
        let (sh, sw) = size(scale);
        let width = config.decoder_width(scale);
        for _ in 0..2 * n_branches {
            conv(ConvSpec::same(width, width, 3), sh, sw);
            conv(ConvSpec::same(width, width, 3), sh, sw);
            extra_params += config.eca_kernel as u64;
        }
    }

    let mut hfe = |conv: &mut dyn FnMut(ConvSpec, usize, usize),
                   width: usize,
                   heads: usize,
                   sh: usize,
                   sw: usize| {
        let hidden = width * config.ffn_expansion;
        conv(ConvSpec::same(width, 3 * width, 1), sh, sw);
        conv(ConvSpec::same(width, width, 1), sh, sw);
        conv(ConvSpec::same(width, 2 * hidden, 1), sh, sw);
        conv(ConvSpec::depthwise(2 * hidden, 3), sh, sw);
        conv(ConvSpec::same(hidden, width, 1), sh, sw);
        extra_params += (heads + 2 * width) as u64;
        extra_macs += (2 * width * width / heads * sh * sw) as u64;
    };

    hfe(&mut conv, 2 * c, config.heads[2], h, w);
    conv(ConvSpec::down(2 * c, 2 * c), h, w);
    hfe(&mut conv, 2 * c, config.heads[1], h / 2, w / 2);
    conv(ConvSpec::down(2 * c, 4 * c), h / 2, w / 2);

    for scale in 0..SCALES {
        let (sh, sw) = size(scale);
        let width = config.decoder_width(scale);
        conv(ConvSpec::same(3 * width, 1, 3), sh, sw);
        conv(ConvSpec::same(3 * width, 3 * width, 3), sh, sw);
        conv(ConvSpec::same(3 * width, width, 3), sh, sw);
    }
    if config.use_gru {
        for _ in 0..3 {
            conv(
                ConvSpec::same(8 * c, 4 * c, config.gru_kernel),
                h / 4,
                w / 4,
            );
        }
    }
    hfe(&mut conv, 4 * c, config.heads[0], h / 4, w / 4);
    hfe(&mut conv, 2 * c, config.heads[1], h / 2, w / 2);
    // transposed 2x2 convolutions
    for (cin, cout, sh, sw) in [(4 * c, 2 * c, h / 4, w / 4), (2 * c, c, h / 2, w / 2)] {
        extra_params += (cin * cout * 4 + cout) as u64;
        extra_macs += (cin * cout * 4 * sh * sw) as u64;
    }
    conv(ConvSpec::same(c, 3, 3), h, w);
    Ok((params + extra_params, macs + extra_macs))
}
