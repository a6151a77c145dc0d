//! Dual-decoder composition and ablation variants.

use cevae_core::decoder::{DecoderConfig, SpatialDecoder};
use cevae_core::{AblationMode, CeVae, CoreError, LatentCode, ModelConfig};
use cevae_tensor::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn latent(cfg: &ModelConfig, seed: u64) -> LatentCode<f64> {
    let s = cfg.latent_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentCode::new(Tensor::randn(
        &[1, cfg.encoder.latent_channels, s, s],
        1.0,
        &mut rng,
    ))
    .unwrap()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn output_is_the_sum_of_both_branches() {
    let cfg = ModelConfig::desk();
    let model = CeVae::<f64>::new(cfg.clone(), 1).unwrap();
    let x = latent(&cfg, 2);
    let dc = model
        .capsule_decoder()
        .unwrap()
        .decode_capsule(&model.capsule_vectors(&x).unwrap())
        .unwrap();
    let ds = model.spatial_decoder().unwrap().decode_spatial(&x).unwrap();
    let raw = model.decode_raw(&x).unwrap();
    assert_eq!(raw.dims(), &[1, 3, 32, 32]);
    assert!(max_diff(&raw, &(&dc + &ds)) < 1e-12);
    let out = model.enhance(&x).unwrap();
    let clamped = raw.clamp(-1.0, 1.0);
    assert!(max_diff(out.tensor(), &clamped) < 1e-12);
    assert!(out.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn ablation_variants_reproduce_single_branches_exactly() {
    let cfg = ModelConfig::desk();
    let full = CeVae::<f64>::new(cfg.clone(), 3).unwrap();
    let x = latent(&cfg, 4);
    let branches = full.branches(&x).unwrap();

    let caps_only = full.ablation_variant(AblationMode::NoSpatial).unwrap();
    assert!(caps_only.spatial_decoder().is_none());
    assert_eq!(
        caps_only.decode_raw(&x).unwrap().to_vec(),
        branches.capsule.clone().unwrap().to_vec()
    );

    let spatial_only = full.ablation_variant(AblationMode::NoCapsule).unwrap();
    assert!(spatial_only.capsules().is_none() && spatial_only.capsule_decoder().is_none());
    assert_eq!(
        spatial_only.decode_raw(&x).unwrap().to_vec(),
        branches.spatial.clone().unwrap().to_vec()
    );

    // building the variant from scratch with the same seed gives the same weights
    let fresh = CeVae::<f64>::new(
        ModelConfig {
            mode: AblationMode::NoSpatial,
            ..cfg
        },
        3,
    )
    .unwrap();
    assert_eq!(
        fresh.decode_raw(&x).unwrap().to_vec(),
        branches.capsule.unwrap().to_vec()
    );
}

#[test]
fn zeroed_spatial_decoder_leaves_only_the_capsule_branch() {
    let cfg = ModelConfig::desk();
    let model = CeVae::<f64>::new(cfg.clone(), 5).unwrap();
    let x = latent(&cfg, 6);
    let caps = model.branches(&x).unwrap().capsule.unwrap();
    let mut zeroed = 0;
    for p in model.store().all() {
        if p.name().starts_with("spatial_decoder.") {
            p.set(vec![0.0; p.tensor().numel()]);
            zeroed += 1;
        }
    }
    assert!(zeroed > 0);
    assert_eq!(model.decode_raw(&x).unwrap().to_vec(), caps.to_vec());
}

#[test]
fn spatial_decoder_upsamples_sixteen_fold() {
    let store = ParamStore::<f32>::new(7);
    let dec = SpatialDecoder::new(&store.root(), DecoderConfig::reference()).unwrap();
    assert_eq!(dec.num_stages(), 4);
    let x = LatentCode::new(Tensor::<f32>::full(&[1, 256, 4, 4], 0.1)).unwrap();
    let y = dec.decode_spatial(&x).unwrap();
    assert_eq!(y.dims(), &[1, 3, 64, 64]);
    let wrong = LatentCode::new(Tensor::<f32>::zeros(&[1, 128, 4, 4])).unwrap();
    assert!(dec.decode_spatial(&wrong).is_err());
}

#[test]
fn full_forward_from_images() {
    let cfg = ModelConfig::desk();
    let model = CeVae::<f64>::new(cfg.clone(), 8).unwrap();
    model.set_training(false);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = Tensor::<f64>::randn(&[2, 3, 32, 32], 0.5, &mut rng);
    let code = model.encode(&img).unwrap();
    assert_eq!(code.batch(), 2);
    assert_eq!(
        code.shape(),
        [
            cfg.encoder.latent_channels,
            cfg.latent_size(),
            cfg.latent_size()
        ]
    );
    let a = model.forward(&img).unwrap();
    let b = model.decode_raw(&code).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());
}

#[test]
fn decoding_rejects_a_latent_of_another_shape() {
    let model = CeVae::<f64>::new(ModelConfig::desk(), 0).unwrap();
    let wrong = LatentCode::new(Tensor::<f64>::zeros(&[1, 16, 8, 8])).unwrap();
    assert!(matches!(model.branches(&wrong), Err(CoreError::Input(_))));
}
