//! Training loop determinism, checkpoints, phase isolation and ablations.

use cevae_core::data::{synthetic_pairs, PairedSample};
use cevae_core::metrics::MetricRecord;
use cevae_core::objectives::{LossToggles, LAMBDA_MAX};
use cevae_core::trainer::{
    ablate_losses, finetune, load_model, pretrain, AblationRow, AblationTable, Checkpoint,
    TrainConfig, Trainer,
};
use cevae_core::{CoreError, ModelConfig};
use cevae_tensor::{ParamStore, Tensor};

fn cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        steps,
        ..TrainConfig::desk()
    }
}

fn data() -> Vec<PairedSample> {
    synthetic_pairs(4, 32, 1)
}

fn fingerprint(store: &ParamStore<f32>) -> Vec<(String, Vec<f32>)> {
    store
        .all()
        .iter()
        .map(|p| (p.name().to_string(), p.tensor().to_vec()))
        .collect()
}

#[test]
fn fixed_seed_runs_are_identical() {
    let run = || {
        let mut t = Trainer::<f32>::new(
            ModelConfig::desk(),
            TrainConfig {
                augment: true,
                ..cfg(10)
            },
        )
        .unwrap();
        t.run(&data(), 10, None, None).unwrap();
        (t.history().to_vec(), fingerprint(t.model().store()))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.len(), 10);
    assert_eq!(a, b);
}

#[test]
fn checkpoint_restores_the_exact_model() {
    let mut t = Trainer::<f64>::new(ModelConfig::desk(), cfg(3)).unwrap();
    t.run(&data(), 3, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    t.checkpoint().save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt, t.checkpoint());
    assert_eq!(ckpt.step, 3);

    let model = load_model::<f64>(&ckpt).unwrap();
    model.set_training(false);
    t.model().set_training(false);
    let x = cevae_core::Image::batch_tensor::<f64>(&[&data()[0].degraded]).unwrap();
    let a = t.model().forward(&x).unwrap().to_vec();
    let b = model.forward(&x).unwrap().to_vec();
    assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn resume_checks_the_architecture_and_continues_counting() {
    let mut t = Trainer::<f32>::new(ModelConfig::desk(), cfg(2)).unwrap();
    t.run(&data(), 2, None, None).unwrap();
    let ckpt = t.checkpoint();

    let mut other = ModelConfig::desk();
    other.decoder.norm_groups = 4;
    assert!(matches!(
        Trainer::<f32>::resume(&ckpt, &other, cfg(2)),
        Err(CoreError::Checkpoint(_))
    ));

    let mut resumed = Trainer::<f32>::resume(&ckpt, &ModelConfig::desk(), cfg(2)).unwrap();
    assert_eq!(resumed.step(), 2);
    assert_eq!(
        fingerprint(resumed.model().store()),
        fingerprint(t.model().store())
    );
    resumed.run(&data(), 2, None, None).unwrap();
    t.run(&data(), 2, None, None).unwrap();
    assert_eq!(resumed.step(), 4);
    // resuming mid-run matches an uninterrupted run
    assert_eq!(
        fingerprint(resumed.model().store()),
        fingerprint(t.model().store())
    );

    let tuned = finetune::<f32>(cfg(1), &data(), &ckpt).unwrap();
    assert_eq!(tuned.step(), 3);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let t = Trainer::<f32>::new(ModelConfig::desk(), cfg(1)).unwrap();
    let mut bytes = t.checkpoint().to_bytes();
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..40]),
        Err(CoreError::Format { .. })
    ));
    bytes[6] ^= 1; // stored hash
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(CoreError::Format { offset: 5, .. })
    ));
    assert!(matches!(
        Checkpoint::from_bytes(b"NOPE...."),
        Err(CoreError::Format { offset: 0, .. })
    ));
}

#[test]
fn adaptive_weight_stays_finite_and_clamped() {
    let c = TrainConfig {
        disc_start_step: 0,
        ..cfg(3)
    };
    let mut t = Trainer::<f32>::new(ModelConfig::desk(), c).unwrap();
    t.run(&data(), 3, None, None).unwrap();
    for r in t.history() {
        assert!(r.losses.is_finite());
        assert!(r.losses.lambda > 0.0 && r.losses.lambda <= LAMBDA_MAX);
        assert!(r.disc_loss.is_some_and(f64::is_finite));
        assert!(
            (r.losses.gan - r.losses.lambda * r.losses.gan_raw).abs()
                <= 1e-9 * r.losses.gan.abs().max(1.0)
        );
    }
}

#[test]
fn discriminator_waits_for_its_start_step() {
    let c = TrainConfig {
        disc_start_step: 2,
        ..cfg(3)
    };
    let mut t = Trainer::<f32>::new(ModelConfig::desk(), c).unwrap();
    let before = fingerprint(t.discriminator_store());
    t.run(&data(), 2, None, None).unwrap();
    assert_eq!(fingerprint(t.discriminator_store()), before);
    assert!(t
        .history()
        .iter()
        .all(|r| r.disc_loss.is_none() && r.losses.gan == 0.0));
    t.run(&data(), 1, None, None).unwrap();
    assert_ne!(fingerprint(t.discriminator_store()), before);
}

#[test]
fn each_half_step_only_touches_its_own_network() {
    let c = TrainConfig {
        disc_start_step: 0,
        ..cfg(1)
    };
    let mut t = Trainer::<f32>::new(ModelConfig::desk(), c).unwrap();
    let batch = &data()[..2];
    let (g0, d0) = (
        fingerprint(t.model().store()),
        fingerprint(t.discriminator_store()),
    );
    let (_, gt, pred) = t.generator_update(batch).unwrap();
    let (g1, d1) = (
        fingerprint(t.model().store()),
        fingerprint(t.discriminator_store()),
    );
    assert_ne!(g0, g1);
    assert_eq!(d0, d1);
    t.discriminator_update(&gt, &pred).unwrap();
    assert_eq!(fingerprint(t.model().store()), g1);
    assert_ne!(fingerprint(t.discriminator_store()), d1);
    assert!(t.generator_update(&[]).is_err());
}

#[test]
fn log_lines_and_evaluation_hook() {
    let c = TrainConfig {
        eval_every: 2,
        ..cfg(4)
    };
    let mut t = Trainer::<f32>::new(ModelConfig::desk(), c).unwrap();
    let mut log = Vec::new();
    let eval = &data()[..2];
    t.run(&data(), 4, Some(eval), Some(&mut log)).unwrap();
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines
        .iter()
        .enumerate()
        .all(|(i, l)| l.split('\t').count() == 7 && l.starts_with(&format!("{i}\t"))));
    let steps: Vec<u64> = t.evaluations().iter().map(|(s, _)| *s).collect();
    assert_eq!(steps, [2, 4]);
    assert_eq!(t.evaluations()[0].1.len(), 2);
}

#[test]
fn pretraining_uses_reference_images_as_input() {
    let t = pretrain::<f32>(ModelConfig::desk(), cfg(2), &data()).unwrap();
    assert_eq!(t.step(), 2);
    assert_eq!(t.config().mode, cevae_core::trainer::TrainMode::Pretrain);
    let preds = t.predict(&data()).unwrap();
    assert_eq!(preds.len(), 4);
    assert!(preds.iter().all(|p| p.height() == 32));
}

#[test]
fn ablation_rows_are_persisted_and_reproducible() {
    let sets: Vec<LossToggles> = vec!["rec".parse().unwrap(), "rec,ssim".parse().unwrap()];
    let (train, eval) = (data(), synthetic_pairs(2, 32, 7));
    let run = || ablate_losses::<f32>(&ModelConfig::desk(), &cfg(3), &train, &eval, &sets).unwrap();
    let a = run();
    assert_eq!(a.rows.len(), 2);
    assert_eq!(a.rows[1].toggles, sets[1]);
    assert!(a.rows.iter().all(|r| r.records.len() == 2));
    assert_ne!(a.rows[0].records, a.rows[1].records);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ablation.tsv");
    a.write(&path).unwrap();
    let back = AblationTable::from_tsv(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, a);
    assert_eq!(run().to_tsv(), a.to_tsv());
    assert!(matches!(
        ablate_losses::<f32>(&ModelConfig::desk(), &cfg(1), &train, &eval, &sets[..1]),
        Err(CoreError::Config(_))
    ));
}

#[test]
fn batch_tensor_matches_images() {
    let d = data();
    let t: Tensor<f32> =
        cevae_core::Image::batch_tensor(&[&d[0].reference, &d[1].reference]).unwrap();
    assert_eq!(t.dims(), &[2, 3, 32, 32]);
}

#[test]
fn ablation_summary_quartiles_follow_the_midpoint_rule() {
    let records = |vals: &[f64]| {
        vals.iter()
            .enumerate()
            .map(|(i, &psnr)| MetricRecord {
                image_id: format!("{i}"),
                psnr,
                ssim: 0.5,
                lpips: None,
            })
            .collect::<Vec<_>>()
    };
    let table = AblationTable {
        rows: vec![
            AblationRow {
                toggles: "rec".parse().unwrap(),
                records: records(&[14.0, 11.0, 12.0, 20.0]),
            },
            AblationRow {
                toggles: "rec,ssim".parse().unwrap(),
                records: records(&[9.0, 13.0, 10.0, 12.0, 11.0]),
            },
        ],
    };
    let text = table.summary_tsv();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    // sorted 11 12 14 20: positions 0.75, 1.5, 2.25 pair ranks (0,1) (1,2) (2,3)
    let f: Vec<f64> = lines[1]
        .split('\t')
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(f[0], 4.0);
    assert_eq!(f[1], 14.25);
    assert!((f[2] - 12.1875f64.sqrt()).abs() < 1e-12);
    assert_eq!(&f[3..], &[11.0, 11.5, 13.0, 17.0, 20.0]);
    // sorted 9..13: positions 1, 2, 3 land on ranks exactly
    assert!(lines[2].starts_with("rec,ssim\t5\t11\t"));
    assert!(lines[2].ends_with("\t9\t10\t11\t12\t13"));
    assert_eq!(table.to_tsv().lines().count(), 1 + 9);
}
