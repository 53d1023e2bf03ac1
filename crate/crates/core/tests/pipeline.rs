use vidiff_core::checkpoint;
use vidiff_core::denoiser::{DenoiserConfig, DenoiserParams, EpsModel};
use vidiff_core::evalkit::identity_preservation;
use vidiff_core::sampler::{translate, SamplerConfig};
use vidiff_core::schedule::ScheduleConfig;
use vidiff_core::synthdata::{
    build_single_modality_dataset, load_manifest_dataset, write_dataset, DatasetManifest, ManifestEntry, SynthConfig,
};
use vidiff_core::trainer::{train, TrainConfig, TrainOutputs};
use vidiff_core::ModalityIndicator::{Infrared, Visible};
use vidiff_core::ImageBatch;

const SIZE: (usize, usize) = (16, 32);

fn small_model() -> DenoiserConfig {
    DenoiserConfig {
        image_size: SIZE,
        base_channels: 8,
        embedding_dim: 16,
        max_groups: 4,
        output_skip: Some(ScheduleConfig::default()),
        ..DenoiserConfig::default()
    }
}

#[test]
fn train_checkpoint_translate_and_score() {
    let data = SynthConfig {
        n_ids: 3,
        per_id: 2,
        size: SIZE,
        seed: 4,
        ..SynthConfig::default()
    };
    let (ds, _) = build_single_modality_dataset(&data).unwrap();
    let cfg = TrainConfig {
        steps: 6,
        batch_size: 4,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let outs = TrainOutputs::in_run_dir(tmp.path());
    let init = DenoiserParams::<f32>::init(&small_model(), 2).unwrap();
    let trained = train(&ds, init, &cfg, Some(&outs)).unwrap();
    assert_eq!(trained.log.len(), 6);

    let (loaded, manifest) = checkpoint::load_denoiser(&outs.ckpt_dir).unwrap();
    assert_eq!(loaded.store(), trained.params.store());
    assert_eq!(manifest.step, 6);

    let sched = cfg.schedule.build().unwrap();
    let vis: Vec<usize> = (0..ds.images.len()).filter(|&i| ds.images.modality[i] == Visible).collect();
    let src = ds.images.select(&vis[..3]);
    let sampler = SamplerConfig {
        ddim_steps: Some(3),
        seed: 8,
        ..SamplerConfig::default()
    };
    let a = translate(&loaded, &sched, &src, Infrared, &sampler).unwrap();
    let b = translate(&trained.params, &sched, &src, Infrared, &sampler).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.images.data.shape(), src.data.shape());
    assert_eq!(a.images.modality, vec![Infrared; 3]);
    assert!(a.images.data.data().iter().all(|v| (-1.0..=1.0).contains(v)));

    let filter = loaded.condition_filter().unwrap();
    let scores = identity_preservation(&a.images, &a.condition.unwrap().data, &filter).unwrap();
    assert_eq!(scores.len(), 3);
    assert!(scores.iter().all(|s| (-1.0..=1.0).contains(s)));
}

#[test]
fn translated_images_round_trip_through_a_manifest_directory() {
    let data = SynthConfig {
        n_ids: 2,
        per_id: 2,
        size: SIZE,
        ..SynthConfig::default()
    };
    let (ds, _) = build_single_modality_dataset(&data).unwrap();
    let images: ImageBatch = ds.images.select(&[0, 1]);
    let manifest = DatasetManifest {
        entries: (0..2)
            .map(|i| ManifestEntry {
                path: format!("infrared/{i:04}.png"),
                label: Some(i),
                modality: Infrared,
            })
            .collect(),
    };
    let tagged = ImageBatch::new(images.data.clone(), vec![Infrared; 2]).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path(), &tagged, &manifest).unwrap();
    let (back, m) = load_manifest_dataset(tmp.path(), SIZE).unwrap();
    assert_eq!(m, manifest);
    assert_eq!(back.modality, tagged.modality);
    let step = 1.0 / 255.0 + 1e-6;
    for (a, b) in back.data.data().iter().zip(tagged.data.data()) {
        assert!((a - b).abs() <= step, "{a} vs {b}");
    }
}
