//! Shallow feature extraction, three-scale pyramids, and SNR-guided regional
//! selection of image and event features.
//!
//! Scale indices follow the network's convention: scale 2 is full
//! resolution with `C` channels, scale 1 is half resolution with `2C`, and
//! scale 0 is quarter resolution with `4C`.

use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::event::VoxelGrid;
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::params::{uniform_param, Conv, ConvSpec, ParamId, ParamStore};
use crate::preprocessing::{avg_pool2, SnrMap};
use crate::tensor::Tensor;

pub const SCALES: usize = 3;

/// `C×H×W` activations tagged with their pyramid scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub scale: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }
}

/// Channel count at `scale` for base width `c`.
pub fn scale_channels(c: usize, scale: usize) -> usize {
    c << (SCALES - 1 - scale)
}

/// Efficient channel attention: pooled channel descriptor → 1-D conv → sigmoid gate.
#[derive(Clone, Debug)]
pub struct Eca {
    pub kernel: ParamId,
}

impl Eca {
    pub fn new(store: &mut ParamStore, name: &str, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (k as f64).sqrt();
        Self {
            kernel: uniform_param(store, &format!("{name}.kernel"), &[k], bound, rng),
        }
    }

    pub fn gate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let pooled = g.global_avg_pool(x);
        let k = g.param(store, self.kernel);
        let logits = g.conv1d(pooled, k);
        g.sigmoid(logits)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gate = self.gate(g, store, x);
        g.mul_channel(x, gate)
    }
}

/// `x + ECA(conv(act(conv(x))))`
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub eca: Eca,
    pub slope: f64,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        eca_kernel: usize,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv1: Conv::new(
                store,
                &format!("{name}.conv1"),
                ConvSpec::same(channels, channels, 3),
                rng,
            ),
            conv2: Conv::new(
                store,
                &format!("{name}.conv2"),
                ConvSpec::same(channels, channels, 3),
                rng,
            ),
            eca: Eca::new(store, &format!("{name}.eca"), eca_kernel, rng),
            slope,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.conv1.forward(g, store, x);
        let y = g.leaky_relu(y, self.slope);
        let y = self.conv2.forward(g, store, y);
        let y = self.eca.forward(g, store, y);
        g.add(x, y)
    }
}

/// Two residual blocks producing the pre-mask features of a selection block.
#[derive(Clone, Debug)]
pub struct SelectionBranch {
    pub blocks: [ResidualBlock; 2],
}

impl SelectionBranch {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        eca_kernel: usize,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            blocks: [
                ResidualBlock::new(
                    store,
                    &format!("{name}.block0"),
                    channels,
                    eca_kernel,
                    slope,
                    rng,
                ),
                ResidualBlock::new(
                    store,
                    &format!("{name}.block1"),
                    channels,
                    eca_kernel,
                    slope,
                    rng,
                ),
            ],
        }
    }

    pub fn features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.blocks[0].forward(g, store, x);
        self.blocks[1].forward(g, store, y)
    }

    /// Zeroes the second convolution of each block so the branch is the identity.
    pub fn make_identity(&self, store: &mut ParamStore) {
        for b in &self.blocks {
            b.conv2.zero(store);
        }
    }
}

/// Image-regional selection: `M̂ ⊙ F̂`.
pub fn irfs_graph(
    g: &mut Graph,
    store: &ParamStore,
    branch: &SelectionBranch,
    f: Var,
    m_hat: Var,
) -> Var {
    let feats = branch.features(g, store, f);
    g.mul_spatial(feats, m_hat)
}

/// Event-regional selection: `(1 − M̂) ⊙ F̂`.
pub fn erfs_graph(
    g: &mut Graph,
    store: &ParamStore,
    branch: &SelectionBranch,
    f: Var,
    m_hat: Var,
) -> Var {
    let feats = branch.features(g, store, f);
    let inv = g.one_minus(m_hat);
    g.mul_spatial(feats, inv)
}

fn check_mask(f: &FeatureMap, m: &SnrMap) -> Result<()> {
    ensure!(
        f.height() == m.height && f.width() == m.width,
        ShapeMismatch,
        "feature {}x{} vs SNR map {}x{}",
        f.height(),
        f.width(),
        m.height,
        m.width
    );
    Ok(())
}

fn run_masked(
    f: &FeatureMap,
    m_hat: &SnrMap,
    branch: &SelectionBranch,
    store: &ParamStore,
    select: fn(&mut Graph, &ParamStore, &SelectionBranch, Var, Var) -> Var,
) -> Result<FeatureMap> {
    check_mask(f, m_hat)?;
    let mut g = Graph::inference();
    let x = g.constant(f.tensor.clone());
    let m = g.constant(m_hat.to_tensor());
    let y = select(&mut g, store, branch, x, m);
    Ok(FeatureMap {
        tensor: g.value(y).clone(),
        scale: f.scale,
    })
}

pub fn irfs(
    f: &FeatureMap,
    m_hat: &SnrMap,
    branch: &SelectionBranch,
    store: &ParamStore,
) -> Result<FeatureMap> {
    run_masked(f, m_hat, branch, store, irfs_graph)
}

pub fn erfs(
    f: &FeatureMap,
    m_hat: &SnrMap,
    branch: &SelectionBranch,
    store: &ParamStore,
) -> Result<FeatureMap> {
    run_masked(f, m_hat, branch, store, erfs_graph)
}

pub fn eca(f: &FeatureMap, module: &Eca, store: &ParamStore) -> FeatureMap {
    let mut g = Graph::inference();
    let x = g.constant(f.tensor.clone());
    let y = module.forward(&mut g, store, x);
    FeatureMap {
        tensor: g.value(y).clone(),
        scale: f.scale,
    }
}

/// Independent 3×3 convolutions lifting the light-up image and the voxel grid to `C` channels.
#[derive(Clone, Debug)]
pub struct ShallowExtractor {
    pub image: Conv,
    pub events: Conv,
}

impl ShallowExtractor {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        bins: usize,
        c: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            image: Conv::new(
                store,
                &format!("{name}.image"),
                ConvSpec::same(3, c, 3),
                rng,
            ),
            events: Conv::new(
                store,
                &format!("{name}.events"),
                ConvSpec::same(bins, c, 3),
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, i_lu: Var, voxels: Var) -> (Var, Var) {
        (
            self.image.forward(g, store, i_lu),
            self.events.forward(g, store, voxels),
        )
    }
}

pub fn extract_shallow(
    i_lu: &Image,
    grid: &VoxelGrid,
    extractor: &ShallowExtractor,
    store: &ParamStore,
) -> Result<(FeatureMap, FeatureMap)> {
    ensure!(
        i_lu.height() == grid.height() && i_lu.width() == grid.width(),
        ShapeMismatch,
        "image {}x{} vs voxel grid {}x{}",
        i_lu.height(),
        i_lu.width(),
        grid.height(),
        grid.width()
    );
    let expected_bins = store.get(extractor.events.weight).shape()[1];
    ensure!(
        grid.bins() == expected_bins,
        ShapeMismatch,
        "voxel grid has {} bins, extractor expects {}",
        grid.bins(),
        expected_bins
    );
    let mut g = Graph::inference();
    let x = g.constant(i_lu.to_tensor());
    let e = g.constant(grid.data().clone());
    let (fi, fe) = extractor.forward(&mut g, store, x, e);
    Ok((
        FeatureMap {
            tensor: g.value(fi).clone(),
            scale: SCALES - 1,
        },
        FeatureMap {
            tensor: g.value(fe).clone(),
            scale: SCALES - 1,
        },
    ))
}

/// Two stride-2 4×4 convolutions, each halving resolution and doubling width.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub downs: [Conv; 2],
}

impl Pyramid {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            downs: [
                Conv::new(
                    store,
                    &format!("{name}.down0"),
                    ConvSpec::down(c, 2 * c),
                    rng,
                ),
                Conv::new(
                    store,
                    &format!("{name}.down1"),
                    ConvSpec::down(2 * c, 4 * c),
                    rng,
                ),
            ],
        }
    }

    /// Features indexed by scale: `[quarter, half, full]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, full: Var) -> [Var; SCALES] {
        let half = self.downs[0].forward(g, store, full);
        let quarter = self.downs[1].forward(g, store, half);
        [quarter, half, full]
    }
}

/// Builds the feature and SNR-map pyramids for one input stream.
pub fn build_pyramid(
    f: &FeatureMap,
    m: &SnrMap,
    pyramid: &Pyramid,
    store: &ParamStore,
) -> Result<Vec<(FeatureMap, SnrMap)>> {
    ensure!(
        f.scale == SCALES - 1,
        InvalidArgument,
        "pyramid input must be at full resolution"
    );
    check_mask(f, m)?;
    ensure!(
        f.height().is_multiple_of(4) && f.width().is_multiple_of(4),
        InvalidArgument,
        "feature size {}x{} must be divisible by 4",
        f.height(),
        f.width()
    );
    let mut g = Graph::inference();
    let x = g.constant(f.tensor.clone());
    let feats = pyramid.forward(&mut g, store, x);
    let mut maps = vec![m.clone()];
    for _ in 1..SCALES {
        let prev = maps.last().expect("non-empty");
        let (data, h, w) = avg_pool2(&prev.data, prev.height, prev.width);
        let (raw, _, _) = avg_pool2(&prev.raw, prev.height, prev.width);
        maps.push(SnrMap {
            height: h,
            width: w,
            data,
            raw,
        });
    }
    maps.reverse();
    Ok(feats
        .iter()
        .zip(maps)
        .enumerate()
        .map(|(scale, (&v, m))| {
            (
                FeatureMap {
                    tensor: g.value(v).clone(),
                    scale,
                },
                m,
            )
        })
        .collect())
}
