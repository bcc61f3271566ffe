mod common;

use std::fs;

use evlight_core::checkpoint::Checkpoint;
use evlight_core::fusion::EvLight;
use evlight_core::graph::Graph;
use evlight_core::image::Image;
use evlight_core::preprocessing::ThresholdMode;
use evlight_core::synth::{make_dataset, DatasetConfig, DegradeConfig, SceneConfig, Split};
use evlight_core::Tensor;
use evlight_harness::ablate::{ablate, parse_variants};
use evlight_harness::augment::Augment;
use evlight_harness::data::load_split;
use evlight_harness::infer::{enhance_dir, enhance_sequence, evaluate, reflect_pad};
use evlight_harness::train::{train, train_on};
use evlight_harness::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{dataset, tiny_model, tiny_train};

#[test]
fn train_writes_checkpoints_and_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 3, 1, 4);
    let cfg = tiny_train(&manifest, &dir.path().join("ck"));
    let report = train(&cfg).unwrap();
    // 2 train sequences × 2 windows × 2 epochs
    assert_eq!(report.losses.len(), 8);
    assert_eq!(report.optimizer.step, 8);
    assert!(report
        .losses
        .iter()
        .all(|l| l.loss.is_finite() && l.loss > 0.0));
    assert_eq!(report.checkpoints.len(), 2);
    let curve = fs::read_to_string(cfg.checkpoint_dir.join("loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 9);
    let ck = Checkpoint::load(&report.checkpoints[1]).unwrap();
    assert_eq!(ck.meta["epochs_done"], 2);
    assert_eq!(ck.optimizer.unwrap().step, 8);
}

#[test]
fn per_frame_training_without_gru_or_temporal_term() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 1, 0, 4);
    let mut cfg = tiny_train(&manifest, &dir.path().join("ck"));
    cfg.model.use_gru = false;
    cfg.loss.lambda_temp = 0.0;
    cfg.frames_per_step = 1;
    let report = train(&cfg).unwrap();
    assert_eq!(report.losses.len(), 8);
    assert!(report.losses.iter().all(|l| l.loss.is_finite()));
}

#[test]
fn training_never_reads_the_test_split() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let manifest = dataset(&root, 2, 1, 4);
    fs::remove_dir_all(root.join("seq001")).unwrap();
    train(&tiny_train(&manifest, &dir.path().join("ck"))).unwrap();

    let only_test = dir.path().join("test_only");
    let m = dataset(&only_test, 1, 1, 4);
    let err = train(&tiny_train(&m, &dir.path().join("ck2"))).unwrap_err();
    assert_eq!(err.kind(), "config");
}

#[test]
fn non_finite_input_aborts_with_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 1, 0, 4);
    let mut cfg = tiny_train(&manifest, &dir.path().join("ck"));
    cfg.epochs = 1;
    cfg.crop = None;
    let mut data = load_split(&manifest, Split::Train, cfg.model.bins).unwrap();
    let good = train_on(&cfg, &data).unwrap();

    data[0].low[0].data_mut()[0] = f64::NAN;
    cfg.epochs = 2;
    cfg.resume = Some(good.checkpoints[0].clone());
    match train_on(&cfg, &data) {
        Err(Error::Diverged {
            step,
            last_checkpoint,
        }) => {
            assert_eq!(step, 3);
            assert_eq!(last_checkpoint, Some(good.checkpoints[0].clone()));
        }
        Err(e) => panic!("unexpected {e}"),
        Ok(_) => panic!("training on NaN input succeeded"),
    }
}

#[test]
fn resume_rejects_other_model_config() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 1, 0, 4);
    let mut cfg = tiny_train(&manifest, &dir.path().join("ck"));
    cfg.epochs = 1;
    let r = train(&cfg).unwrap();
    cfg.resume = Some(r.checkpoints[0].clone());
    cfg.epochs = 2;
    cfg.model.use_gru = false;
    assert_eq!(train(&cfg).unwrap_err().kind(), "config");
}

/// Low and normal frames are identical, the light-up is the identity and the
/// head is zero, so the output equals the ground truth.
#[test]
fn identity_checkpoint_scores_the_psnr_cap() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let cfg = DatasetConfig {
        scenes: vec![common::scene(3, 5), common::scene(4, 5)],
        degrade: DegradeConfig {
            scale: 1.0,
            read_noise: 0.0,
            shot_gain: 0.0,
            ..Default::default()
        },
        test_scenes: 2,
        ..Default::default()
    };
    make_dataset(&root, &cfg).unwrap();
    let mut model = EvLight::new(tiny_model()).unwrap();
    model.illumination.force_constant(&mut model.params, 1.0);
    model.head.zero(&mut model.params);
    let ck = dir.path().join("identity.evck");
    Checkpoint::from_model(&model, None, serde_json::Value::Null)
        .save(&ck)
        .unwrap();

    let out = dir.path().join("eval");
    let report = evaluate(&ck, &root.join("manifest.json"), Split::Test, Some(&out)).unwrap();
    assert_eq!(report.summary.frames, 10);
    assert_eq!(report.summary.psnr, 100.0);
    assert_eq!(report.summary.psnr_star, 100.0);
    assert_eq!(report.summary.ssim, 1.0);
    for s in &report.sequences {
        let csv = fs::read_to_string(out.join(format!("{}.csv", s.id))).unwrap();
        assert_eq!(csv.lines().count(), 1 + 5);
    }
    assert!(out.join("summary.json").exists());
}

#[test]
fn evaluation_matches_direct_metric_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 2, 1, 4);
    let mut cfg = tiny_train(&manifest, &dir.path().join("ck"));
    cfg.epochs = 1;
    let r = train(&cfg).unwrap();
    let report = evaluate(&r.checkpoints[0], &manifest, Split::Test, None).unwrap();

    let data = load_split(&manifest, Split::Test, cfg.model.bins).unwrap();
    let outs = enhance_sequence(&r.model, &data[0].low, &data[0].voxels).unwrap();
    for (k, o) in outs.iter().enumerate() {
        let en = o.enhanced.data();
        let gt = data[0].gt[k].data();
        let mse = en
            .iter()
            .zip(gt)
            .map(|(a, b)| (a.clamp(0.0, 1.0) - b).powi(2))
            .sum::<f64>()
            / en.len() as f64;
        let direct = 10.0 * (1.0 / mse).log10();
        let reported = report.sequences[0].metrics.frames[k].psnr;
        assert!(
            (direct - reported).abs() < 1e-9,
            "frame {k}: {direct} vs {reported}"
        );
    }
}

#[test]
fn ablation_table_matches_reevaluation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 2, 1, 4);
    let mut cfg = tiny_train(&manifest, &dir.path().join("ck"));
    cfg.epochs = 1;
    let variants = parse_variants("no_gru,no_selection").unwrap();
    let table = ablate(&cfg, &variants, Split::Test).unwrap();
    let names: Vec<_> = table.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["base", "no_gru", "no_selection"]);
    assert!(table.rows[2].params < table.rows[0].params);
    for row in &table.rows {
        let again = evaluate(&row.checkpoint, &manifest, Split::Test, None).unwrap();
        assert_eq!(again.summary, row.summary);
    }
    let md = fs::read_to_string(cfg.checkpoint_dir.join("ablation.md")).unwrap();
    assert_eq!(md.lines().count(), 2 + 3);
}

#[test]
fn enhance_pads_odd_sizes_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let scene = SceneConfig {
        height: 34,
        width: 38,
        frames: 4,
        seed: 9,
        ..Default::default()
    };
    make_dataset(
        &root,
        &DatasetConfig {
            scenes: vec![scene],
            ..Default::default()
        },
    )
    .unwrap();
    let ck = dir.path().join("m.evck");
    Checkpoint::from_model(
        &EvLight::new(tiny_model()).unwrap(),
        None,
        serde_json::Value::Null,
    )
    .save(&ck)
    .unwrap();
    let input = root.join("seq000");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let s = enhance_dir(&ck, &input, &a, true).unwrap();
    enhance_dir(&ck, &input, &b, false).unwrap();
    assert_eq!(s.frames, 4);
    for k in 0..4 {
        let name = format!("{k:06}.png");
        let img = Image::load_png(a.join(&name)).unwrap();
        assert_eq!((img.height(), img.width()), (34, 38));
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap()
        );
        assert!(a.join("aux").join(format!("snr_{name}")).exists());
        assert!(a.join("aux").join(format!("light_up_{name}")).exists());
    }
    assert!(!b.join("aux").exists());
}

#[test]
fn enhance_reports_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.evck");
    Checkpoint::from_model(
        &EvLight::new(tiny_model()).unwrap(),
        None,
        serde_json::Value::Null,
    )
    .save(&ck)
    .unwrap();
    let err = enhance_dir(&ck, &dir.path().join("nope"), &dir.path().join("o"), false).unwrap_err();
    assert!(err.to_string().contains("nope"));
    assert!(reflect_pad(&Tensor::zeros([1, 1, 1]), 4).is_err());
    let t = Tensor::new([1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
    let padded = reflect_pad(&t, 4).unwrap();
    assert_eq!(
        padded.data(),
        &[0., 1., 2., 1., 3., 4., 5., 4., 6., 7., 8., 7., 3., 4., 5., 4.]
    );
    assert!(reflect_pad(&Tensor::zeros([1, 2, 4]), 4).is_err());
}

/// Rotating or flipping the input moves the SNR masks with it, sample for sample.
#[test]
fn snr_masks_follow_spatial_augmentation() {
    let mut cfg = tiny_model();
    cfg.snr.mode = ThresholdMode::Binary;
    let mut model = EvLight::new(cfg).unwrap();
    model.illumination.force_constant(&mut model.params, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = Tensor::new(
        [3, 32, 32],
        (0..3 * 32 * 32)
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    )
    .unwrap();
    let vox = Tensor::zeros([4, 32, 32]);
    let masks = |x: &Tensor| {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let out = model
            .forward_graph(&mut g, &model.params, v, &vox, None)
            .unwrap();
        out.masks.map(|m| g.value(m).clone())
    };
    let base = masks(&img);
    for (rot, hflip) in [(1, false), (2, false), (3, true), (0, true)] {
        let a = Augment {
            rot,
            hflip,
            ..Augment::identity(32, 32)
        };
        let moved = masks(&a.apply(&img).unwrap());
        for (m, b) in moved.iter().zip(&base) {
            let (_, h, w) = b.dims3();
            let expect = Augment {
                rot,
                hflip,
                ..Augment::identity(h, w)
            }
            .apply(b)
            .unwrap();
            assert_eq!(m, &expect, "rot {rot} flip {hflip}");
        }
    }
}
