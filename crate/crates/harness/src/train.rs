use std::fs;
use std::path::PathBuf;

use evlight_core::checkpoint::Checkpoint;
use evlight_core::fusion::EvLight;
use evlight_core::graph::{Graph, Var};
use evlight_core::objectives::{reconstruction_graph, temporal_graph, LossConfig, Perceptual};
use evlight_core::params::ParamStore;
use evlight_core::synth::Split;
use evlight_core::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adam::Adam;
use crate::augment::{sample_rng, Augment};
use crate::config::TrainConfig;
use crate::data::{load_split, SequenceData};
use crate::error::{config_ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub losses: Vec<StepLoss>,
    pub checkpoints: Vec<PathBuf>,
    pub model: EvLight,
    pub optimizer: Adam,
}

/// Frames of one truncated backpropagation window.
#[derive(Clone, Copy, Debug)]
pub struct Window<'a> {
    pub low: &'a [Tensor],
    pub gt: &'a [Tensor],
    pub voxels: &'a [Tensor],
}

/// Detached values handed from one window to the next.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Carry {
    pub state: Option<Tensor>,
    /// Enhanced output and ground truth of the previous frame.
    pub prev: Option<(Tensor, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct WindowResult {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub carry: Carry,
}

/// Records the mean per-frame objective of a window on `g`. The temporal term
/// is skipped only when there is no previous frame, i.e. at a sequence start.
pub fn window_loss(
    g: &mut Graph,
    model: &EvLight,
    store: &ParamStore,
    phi: &Perceptual,
    loss: &LossConfig,
    win: &Window,
    carry: &Carry,
) -> Result<(Var, Carry)> {
    let n = win.low.len();
    config_ensure!(
        n > 0 && win.gt.len() == n && win.voxels.len() == n,
        "window needs matching low, gt and voxel frames"
    );
    let mut state = carry.state.clone().map(|s| g.constant(s));
    let mut prev = carry
        .prev
        .clone()
        .map(|(en, gt)| (g.constant(en), g.constant(gt)));
    let mut total: Option<Var> = None;
    for k in 0..n {
        let img = g.constant(win.low[k].clone());
        let out = model.forward_graph(g, store, img, &win.voxels[k], state)?;
        let gt = g.constant(win.gt[k].clone());
        let mut term = reconstruction_graph(g, out.enhanced, gt, loss, phi);
        if let Some((en_prev, gt_prev)) = prev {
            if loss.lambda_temp != 0.0 {
                let temp = temporal_graph(g, out.enhanced, en_prev, gt, gt_prev);
                let temp = g.mul_scalar(temp, loss.lambda_temp);
                term = g.add(term, temp);
            }
        }
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
        state = out.state;
        prev = Some((out.enhanced, gt));
    }
    let mean = g.mul_scalar(total.expect("non-empty window"), 1.0 / n as f64);
    let carry = Carry {
        state: state.map(|s| g.value(s).clone()),
        prev: prev.map(|(en, gt)| (g.value(en).clone(), g.value(gt).clone())),
    };
    Ok((mean, carry))
}

pub fn window_step(
    model: &EvLight,
    phi: &Perceptual,
    loss: &LossConfig,
    win: &Window,
    carry: &Carry,
) -> Result<WindowResult> {
    let mut g = Graph::new();
    let (l, carry) = window_loss(&mut g, model, &model.params, phi, loss, win, carry)?;
    let value = g.value(l).data()[0];
    let grads = g.backward(l);
    let grads = model
        .params
        .ids()
        .map(|id| match grads.param(id) {
            Some(d) => d.to_vec(),
            None => vec![0.0; model.params.get(id).numel()],
        })
        .collect();
    Ok(WindowResult {
        loss: value,
        grads,
        carry,
    })
}

pub fn deterministic_mode() -> bool {
    std::env::var("EVLIGHT_DETERMINISTIC").is_ok_and(|v| v == "1")
}

/// Runs `f` on a single worker thread when deterministic mode is requested.
/// Parallel reductions are already ordered, so this only removes scheduling
/// as a variable.
pub fn pinned<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    if deterministic_mode() {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(1).build() {
            return pool.install(f);
        }
    }
    f()
}

fn augment_sequence(s: &SequenceData, a: &Augment) -> Result<SequenceData> {
    let map = |ts: &[Tensor]| {
        ts.iter()
            .map(|t| Ok(a.apply(t)?))
            .collect::<Result<Vec<_>>>()
    };
    Ok(SequenceData {
        id: s.id.clone(),
        low: map(&s.low)?,
        gt: map(&s.gt)?,
        voxels: map(&s.voxels)?,
    })
}

fn diverged(step: u64, last: &Option<PathBuf>) -> Error {
    Error::Diverged {
        step,
        last_checkpoint: last.clone(),
    }
}

/// Trains on the manifest's train split. The test split is never read.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    pinned(|| {
        cfg.validate()?;
        let data = load_split(&cfg.manifest, Split::Train, cfg.model.bins)?;
        train_on(cfg, &data)
    })
}

pub fn checkpoint_name(epochs_done: usize) -> String {
    format!("epoch_{epochs_done:04}.evck")
}

pub fn train_on(cfg: &TrainConfig, data: &[SequenceData]) -> Result<TrainReport> {
    cfg.validate()?;
    config_ensure!(!data.is_empty(), "no training sequences");
    for s in data {
        config_ensure!(s.len() >= 2, "sequence `{}` needs at least 2 frames", s.id);
        let (h, w) = s.size();
        if let Some(c) = cfg.crop {
            config_ensure!(
                c <= h && c <= w,
                "crop {c} exceeds `{}` resolution {h}x{w}",
                s.id
            );
        }
    }

    let (mut model, mut adam, mut losses, start_epoch) = match &cfg.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            config_ensure!(
                ck.config == cfg.model,
                "checkpoint model config differs from the train config"
            );
            let opt = ck
                .optimizer
                .clone()
                .ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
            let model = ck.to_model()?;
            let adam = Adam::restore(
                &model.params,
                cfg.learning_rate,
                cfg.betas,
                cfg.adam_eps,
                opt,
            )?;
            let losses: Vec<StepLoss> = serde_json::from_value(ck.meta["losses"].clone())?;
            let done = ck.meta["epochs_done"]
                .as_u64()
                .ok_or_else(|| Error::Config("checkpoint meta lacks epochs_done".into()))?;
            (model, adam, losses, done as usize)
        }
        None => {
            let model = EvLight::new(cfg.model.clone())?;
            let adam = Adam::new(&model.params, cfg.learning_rate, cfg.betas, cfg.adam_eps);
            (model, adam, Vec::new(), 0)
        }
    };

    let dir = &cfg.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let phi = Perceptual::new(&cfg.loss.perceptual);
    let fps = cfg.frames_per_step;
    let stored_cfg = TrainConfig {
        resume: None,
        ..cfg.clone()
    };
    let mut checkpoints = Vec::new();
    let mut last_good = cfg.resume.clone();

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut sample_rng(cfg.seed, epoch, u32::MAX as usize));
        let prepared = data
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let (h, w) = s.size();
                let a = Augment::sample(
                    &mut sample_rng(cfg.seed, epoch, i),
                    h,
                    w,
                    cfg.crop,
                    &cfg.augment,
                );
                augment_sequence(s, &a)
            })
            .collect::<Result<Vec<_>>>()?;

        for batch in order.chunks(cfg.batch_size) {
            let mut carries = vec![Carry::default(); batch.len()];
            let windows = batch
                .iter()
                .map(|&i| prepared[i].len().div_ceil(fps))
                .max()
                .unwrap_or(0);
            for w in 0..windows {
                let active: Vec<usize> = (0..batch.len())
                    .filter(|&b| w * fps < prepared[batch[b]].len())
                    .collect();
                let results: Vec<Result<WindowResult>> = active
                    .par_iter()
                    .map(|&b| {
                        let s = &prepared[batch[b]];
                        let r = w * fps..((w + 1) * fps).min(s.len());
                        let win = Window {
                            low: &s.low[r.clone()],
                            gt: &s.gt[r.clone()],
                            voxels: &s.voxels[r],
                        };
                        window_step(&model, &phi, &cfg.loss, &win, &carries[b])
                    })
                    .collect();
                let scale = 1.0 / active.len() as f64;
                let mut loss = 0.0;
                let mut grads: Vec<Vec<f64>> = model
                    .params
                    .ids()
                    .map(|id| vec![0.0; model.params.get(id).numel()])
                    .collect();
                for (&b, r) in active.iter().zip(results) {
                    let r = match r {
                        Ok(r) => r,
                        Err(Error::Core(evlight_core::Error::NonFinite(_))) => {
                            return Err(diverged(adam.step + 1, &last_good))
                        }
                        Err(e) => return Err(e),
                    };
                    loss += r.loss * scale;
                    for (acc, g) in grads.iter_mut().zip(&r.grads) {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v * scale;
                        }
                    }
                    carries[b] = r.carry;
                }
                if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                    return Err(diverged(adam.step + 1, &last_good));
                }
                adam.update(&mut model.params, &grads);
                losses.push(StepLoss {
                    step: adam.step,
                    epoch,
                    loss,
                });
            }
        }

        let meta = json!({
            "epochs_done": epoch + 1,
            "step": adam.step,
            "losses": losses,
            "train_config": stored_cfg,
        });
        let path = dir.join(checkpoint_name(epoch + 1));
        Checkpoint::from_model(&model, Some(adam.state()), meta).save(&path)?;
        write_loss_curve(&dir.join("loss.csv"), &losses)?;
        last_good = Some(path.clone());
        checkpoints.push(path);
    }

    Ok(TrainReport {
        losses,
        checkpoints,
        model,
        optimizer: adam,
    })
}

pub fn write_loss_curve(path: &std::path::Path, losses: &[StepLoss]) -> Result<()> {
    let mut text = String::from("step,epoch,loss\n");
    for l in losses {
        text.push_str(&format!("{},{},{}\n", l.step, l.epoch, l.loss));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
