use facefill::checkpoint::Checkpoint;
use facefill::embedder::ConvEmbedder;
use facefill::inference::InferenceModel;
use facefill::masking::{bucket, generate_irregular_mask, mask_ratio, Bucket, MaskSpec};
use facefill::metrics::{evaluate_corpus, MaskSource};
use facefill::training::{synthetic_samples, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> TrainConfig {
    TrainConfig { input_side: 32, base_channels: 4, residual_blocks: 1, disc_channels: 4, batch_size: 2, seed: 3, ..Default::default() }
}

#[test]
fn train_save_load_and_inpaint() {
    let samples = synthetic_samples(3, 32, 3);
    let mut trainer = Trainer::new(tiny(), samples.clone()).unwrap();
    let logs: Vec<_> = (0..2).map(|_| trainer.train_step().unwrap()).collect();
    assert_eq!((logs[0].step, logs[1].step), (0, 1));
    assert!(logs.iter().all(|l| l.losses.total.is_finite() && l.loss_d.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let id = trainer.checkpoint().save(&path).unwrap();
    let (ck, loaded_id) = Checkpoint::load(&path).unwrap();
    assert_eq!((ck.step, loaded_id.as_str()), (2, id.as_str()));

    let model = InferenceModel::load(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask = generate_irregular_mask(&mut rng, &MaskSpec::for_side(32), 32).unwrap();
    let r = model.run(&samples[0].image, &mask, true).unwrap();
    assert_eq!((r.output.width(), r.output.height()), (32, 32));
    assert_eq!(r.landmarks.unwrap().points().len(), 68);
}

#[test]
fn bucketed_masks_and_corpus_report() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for b in Bucket::RANGED {
        let spec = MaskSpec::for_side(64).with_bucket(Some(b));
        for _ in 0..5 {
            let m = generate_irregular_mask(&mut rng, &spec, 64).unwrap();
            assert_eq!(bucket(mask_ratio(&m)).unwrap(), b);
        }
    }

    let trainer = Trainer::new(tiny(), synthetic_samples(2, 32, 4)).unwrap();
    let ck = trainer.checkpoint();
    let model = InferenceModel::new(ck.generator.clone(), ck.gen.clone(), "t").unwrap();
    let images: Vec<_> = trainer.samples().iter().map(|s| s.image.clone()).collect();
    let masks = MaskSource::Generated { seed: 2, buckets: Bucket::RANGED.to_vec() };
    let report = evaluate_corpus(&model, &images, &masks, &ConvEmbedder::seeded(0)).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.evaluated, 6);
    assert!(report.rows.iter().all(|r| r.count == 2 && r.psnr.is_finite() && r.ssim <= 1.0));
    assert_eq!(report, evaluate_corpus(&model, &images, &masks, &ConvEmbedder::seeded(0)).unwrap());
}
