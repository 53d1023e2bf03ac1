use std::path::Path;

use vidiff_core::checkpoint::{load_denoiser, load_reid, save_reid};
use vidiff_core::conditioning::{condition, low_pass_reference, FilterKind};
use vidiff_core::denoiser::DenoiserParams;
use vidiff_core::evalkit::{
    cmc_map, gap_features, grid_png, identity_preservation, mean, modality_gap, project_2d, scatter_png,
    shuffled_identity_null, symmetric_label_noise, train_reid as fit_reid, LabeledImages, ModalityScorer,
    ToyClassifier,
};
use vidiff_core::labels::LossMode;
use vidiff_core::sampler::{self, partial_noise_translate, SamplerConfig};
use vidiff_core::schedule::NoiseSchedule;
use vidiff_core::synthdata::{
    build_eval_set, build_single_modality_dataset, load_directory_dataset, load_manifest_dataset, write_dataset,
    write_text, DatasetManifest, DiffusionDataset, ManifestEntry, SynthConfig,
};
use vidiff_core::trainer::{smoothed, train, TrainOutputs};
use vidiff_core::{Error, ImageBatch, ModalityIndicator, Result, Tensor};

use crate::error::CliError;
use crate::run::Run;

type CliResult = std::result::Result<(), CliError>;

/// Items translated per sampler call.
const CHUNK: usize = 32;
const GRID_ROWS: usize = 8;
const SCATTER_SIZE: u32 = 400;

fn load_images(dir: &Path, size: (usize, usize)) -> Result<(ImageBatch, DatasetManifest)> {
    if dir.join("manifest.csv").is_file() {
        load_manifest_dataset(dir, size)
    } else {
        load_directory_dataset(dir, size).map(|(d, m)| (d.images, m))
    }
}

/// `--data`, else the run's rendered dataset, else an in-memory render.
fn training_data(run: &Run, data: Option<&Path>) -> Result<(ImageBatch, DatasetManifest)> {
    let size = run.cfg.data.size;
    if let Some(dir) = data {
        return load_images(dir, size);
    }
    let own = run.path("images/dataset");
    if own.join("manifest.csv").is_file() {
        return load_manifest_dataset(&own, size);
    }
    log::info!("no dataset in the run directory; rendering it in memory");
    build_single_modality_dataset(&run.cfg.data).map(|(d, m)| (d.images, m))
}

fn eval_synth(run: &Run) -> SynthConfig {
    SynthConfig {
        per_id: run.cfg.eval.per_id,
        ..run.cfg.data
    }
}

/// Labeled evaluation images: `--data`, else the run's eval set, else an in-memory render.
fn eval_data(run: &Run, data: Option<&Path>) -> Result<(ImageBatch, Vec<usize>)> {
    let size = run.cfg.data.size;
    let own = run.path("images/eval");
    let (images, manifest) = match data {
        Some(dir) => load_images(dir, size)?,
        None if own.join("manifest.csv").is_file() => load_manifest_dataset(&own, size)?,
        None => build_eval_set(&eval_synth(run))?,
    };
    let keep: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].label.is_some())
        .collect();
    if keep.is_empty() {
        return Err(Error::Empty("evaluation set has no labeled images".into()));
    }
    let labels = keep.iter().map(|&i| manifest.entries[i].label.unwrap_or_default()).collect();
    Ok((images.select(&keep), labels))
}

/// Labeled items of `modality` with their labels and manifest entries.
fn labeled(
    images: &ImageBatch,
    manifest: &DatasetManifest,
    modality: ModalityIndicator,
) -> Result<(ImageBatch, Vec<usize>, Vec<ManifestEntry>)> {
    let idx: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].modality == modality && manifest.entries[i].label.is_some())
        .collect();
    if idx.is_empty() {
        return Err(Error::Empty(format!("no labeled {modality} images")));
    }
    let entries: Vec<ManifestEntry> = idx.iter().map(|&i| manifest.entries[i].clone()).collect();
    let labels = entries.iter().map(|e| e.label.unwrap_or_default()).collect();
    Ok((images.select(&idx), labels, entries))
}

fn indices(images: &ImageBatch, m: ModalityIndicator) -> Vec<usize> {
    (0..images.len()).filter(|&i| images.modality[i] == m).collect()
}

/// Calibrated on `images` when both modalities are present, else on the eval set.
fn scorer(run: &Run, images: &ImageBatch) -> Result<ModalityScorer> {
    let (vis, ir) = (ModalityIndicator::Visible, ModalityIndicator::Infrared);
    if !indices(images, vis).is_empty() && !indices(images, ir).is_empty() {
        return ModalityScorer::calibrate(&images.select(&indices(images, vis)).data, &images.select(&indices(images, ir)).data);
    }
    let (ev, _) = build_eval_set(&eval_synth(run))?;
    ModalityScorer::calibrate(&ev.select(&indices(&ev, vis)).data, &ev.select(&indices(&ev, ir)).data)
}

fn first(images: &ImageBatch, n: usize) -> ImageBatch {
    images.select(&(0..n.min(images.len())).collect::<Vec<_>>())
}

/// Translates in chunks; chunk `k` samples with seed `seed + k`.
fn translate_all(
    model: &DenoiserParams<f32>,
    sched: &NoiseSchedule,
    src: &ImageBatch,
    target: ModalityIndicator,
    cfg: &SamplerConfig,
) -> Result<ImageBatch> {
    let mut parts = Vec::new();
    for (k, lo) in (0..src.len()).step_by(CHUNK).enumerate() {
        let idx: Vec<usize> = (lo..(lo + CHUNK).min(src.len())).collect();
        let chunk_cfg = SamplerConfig {
            seed: cfg.seed.wrapping_add(k as u64),
            ..*cfg
        };
        parts.push(sampler::translate(model, sched, &src.select(&idx), target, &chunk_cfg)?.images);
    }
    ImageBatch::concat(&parts.iter().collect::<Vec<_>>())
}

fn retarget(path: &str, target: ModalityIndicator) -> String {
    match path.split_once('/') {
        Some((_, rest)) => format!("{target}/{rest}"),
        None => format!("{target}/{path}"),
    }
}

fn denoiser(run: &Run, rel: &str) -> std::result::Result<DenoiserParams<f32>, CliError> {
    load_denoiser(&run.path(rel)).map(|(p, _)| p).map_err(CliError::checkpoint)
}

fn csv(header: &str, rows: &[String]) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    out
}

pub fn synth(run: &Run) -> CliResult {
    let (ds, manifest) = build_single_modality_dataset(&run.cfg.data)?;
    write_dataset(&run.path("images/dataset"), &ds.images, &manifest)?;
    let (ev, ev_manifest) = build_eval_set(&eval_synth(run))?;
    write_dataset(&run.path("images/eval"), &ev, &ev_manifest)?;
    let mut rows = Vec::new();
    for (split, m) in [("dataset", &manifest), ("eval", &ev_manifest)] {
        for modality in [ModalityIndicator::Visible, ModalityIndicator::Infrared] {
            rows.push(format!("{split},{modality},{},{}", m.count(modality), m.identities(modality).len()));
        }
    }
    write_text(&run.path("metrics/synth.csv"), &csv("split,modality,images,identities", &rows))?;
    log::info!("wrote {} training and {} evaluation images", ds.images.len(), ev.len());
    Ok(())
}

pub fn train_diff(run: &Run, data: Option<&Path>) -> CliResult {
    let (images, _) = training_data(run, data)?;
    let init = DenoiserParams::init(&run.cfg.denoiser, run.cfg.train.seed)?;
    log::info!("training {} parameters on {} images", init.num_parameters(), images.len());
    let result = train(&DiffusionDataset { images }, init, &run.cfg.train, Some(&TrainOutputs::in_run_dir(&run.dir)))?;
    let losses: Vec<f64> = result.log.iter().map(|r| r.loss).collect();
    let rows = vec![format!(
        "{},{},{}",
        result.log.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        smoothed(&losses, 0.9).last().copied().unwrap_or(f64::NAN)
    )];
    write_text(&run.path("metrics/train_diff.csv"), &csv("steps,final_loss,smoothed_loss", &rows))?;
    Ok(())
}

pub fn translate(run: &Run, data: Option<&Path>, limit: Option<usize>) -> CliResult {
    let model = denoiser(run, "ckpt/denoiser")?;
    let sched = run.cfg.train.schedule.build()?;
    let (images, manifest) = training_data(run, data)?;
    let source = run.cfg.data.labeled_modality;
    let target = source.flipped();
    let (mut src, mut labels, mut entries) = labeled(&images, &manifest, source)?;
    if let Some(n) = limit {
        src = first(&src, n);
        labels.truncate(n);
        entries.truncate(n);
    }
    log::info!("translating {} {source} images to {target}", src.len());
    let out = translate_all(&model, &sched, &src, target, &run.cfg.sampler)?;
    let translated = DatasetManifest {
        entries: entries
            .iter()
            .map(|e| ManifestEntry {
                path: retarget(&e.path, target),
                label: e.label,
                modality: target,
            })
            .collect(),
    };
    write_dataset(&run.path("images/translated"), &out, &translated)?;

    let filter = model.config().condition.unwrap_or_default();
    let c_src = condition(&src, &filter)?.data;
    let mut columns = vec![&src.data];
    if model.config().condition.is_some() {
        columns.push(&c_src);
    }
    columns.push(&out.data);
    grid_png(&run.path("images/translate_grid.png"), &columns, GRID_ROWS.min(src.len()))?;

    let ip = mean(&identity_preservation(&out, &c_src, &filter)?);
    let distinct = labels.iter().any(|&l| l != labels[0]);
    let null = if distinct {
        mean(&shuffled_identity_null(&out, &c_src, &labels, &filter, run.cfg.eval.null_pairs, run.cfg.sampler.seed)?)
    } else {
        log::warn!("a single identity; no mismatched pairs for the null");
        f64::NAN
    };
    let acc = scorer(run, &images)?.accuracy(&out.data, target);
    log::info!("target modality {acc:.3}, identity preservation {ip:.3} (null {null:.3})");
    let rows = vec![format!("{target},{},{acc},{ip},{null}", out.len())];
    write_text(
        &run.path("metrics/translate.csv"),
        &csv("target,images,target_modality_accuracy,identity_preservation,null_identity_preservation", &rows),
    )?;
    Ok(())
}

/// Real labeled images, translated images with (possibly noised) labels, their clean
/// labels and the class count.
struct ReidStreams {
    real: LabeledImages,
    generated: LabeledImages,
    clean: Vec<usize>,
    num_classes: usize,
}

fn reid_streams(run: &Run, data: Option<&Path>) -> Result<ReidStreams> {
    let (images, manifest) = training_data(run, data)?;
    let (real, real_labels, _) = labeled(&images, &manifest, run.cfg.data.labeled_modality)?;
    let gen_dir = run.path("images/translated");
    if !gen_dir.join("manifest.csv").is_file() {
        return Err(Error::MissingPath(gen_dir.join("manifest.csv")));
    }
    let (gen, gen_manifest) = load_manifest_dataset(&gen_dir, run.cfg.data.size)?;
    let clean: Vec<usize> = gen_manifest.entries.iter().map(|e| e.label.unwrap_or_default()).collect();
    let num_classes = real_labels.iter().chain(&clean).max().map_or(0, |m| m + 1);
    let noisy = symmetric_label_noise(&clean, num_classes, run.cfg.eval.label_noise, run.cfg.reid.seed);
    Ok(ReidStreams {
        real: LabeledImages {
            images: real.data,
            labels: real_labels,
        },
        generated: LabeledImages {
            images: gen.data,
            labels: noisy,
        },
        clean,
        num_classes,
    })
}

pub fn train_reid(run: &Run, data: Option<&Path>) -> CliResult {
    let s = reid_streams(run, data)?;
    log::info!(
        "training on {} real and {} translated images, {} classes, loss {}",
        s.real.len(),
        s.generated.len(),
        s.num_classes,
        run.cfg.loss.mode
    );
    let result = fit_reid(&s.real, &s.generated, s.num_classes, &run.cfg.loss, &run.cfg.reid)?;
    save_reid(&run.path("ckpt/reid"), &result.classifier, &run.cfg.reid, run.cfg.reid.steps)?;
    let log_rows: Vec<String> = result.losses.iter().enumerate().map(|(i, l)| format!("{},{l}", i + 1)).collect();
    write_text(&run.path("logs/train_reid.csv"), &csv("step,loss", &log_rows))?;
    let clf = &result.classifier;
    let rows = vec![
        format!("real_accuracy,{}", clf.accuracy(&s.real.images, &s.real.labels)),
        format!("translated_accuracy,{}", clf.accuracy(&s.generated.images, &s.clean)),
        format!("final_loss,{}", result.losses.last().copied().unwrap_or(f64::NAN)),
    ];
    write_text(&run.path("metrics/train_reid.csv"), &csv("metric,value", &rows))?;
    Ok(())
}

/// Accuracy on the items whose label the classifier knows.
fn known_accuracy(clf: &ToyClassifier, images: &Tensor<f32>, labels: &[usize]) -> f64 {
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] < clf.num_classes).collect();
    if idx.is_empty() {
        return f64::NAN;
    }
    let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    clf.accuracy(&images.select(&idx), &l)
}

pub fn eval(run: &Run, data: Option<&Path>) -> CliResult {
    let (clf, _) = load_reid(&run.path("ckpt/reid")).map_err(CliError::checkpoint)?;
    let (ev, labels) = eval_data(run, data)?;
    let ranks = &run.cfg.eval.ranks;
    let lab = run.cfg.data.labeled_modality;
    let mut rows = Vec::new();
    for (query, gallery) in [(lab.flipped(), lab), (lab, lab.flipped())] {
        let (qi, gi) = (indices(&ev, query), indices(&ev, gallery));
        if qi.is_empty() || gi.is_empty() {
            log::warn!("no {query} queries or {gallery} gallery; skipping");
            continue;
        }
        let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
        let q = clf.embed_set(&ev.select(&qi), &pick(&qi))?;
        let g = clf.embed_set(&ev.select(&gi), &pick(&gi))?;
        let m = cmc_map(&q, &g, ranks)?;
        let cells: Vec<String> = m.rank_k.iter().map(|(_, v)| v.to_string()).collect();
        log::info!("{query} -> {gallery}: {:?}, mAP {:.3}", m.rank_k, m.map);
        rows.push(format!("{query},{gallery},{},{},{}", cells.join(","), m.map, m.excluded));
    }
    let rank_cols: Vec<String> = ranks.iter().map(|k| format!("rank{k}")).collect();
    let header = format!("query,gallery,{},mAP,excluded", rank_cols.join(","));
    write_text(&run.path("metrics/eval.csv"), &csv(&header, &rows))?;

    let mut acc_rows = Vec::new();
    for m in [ModalityIndicator::Visible, ModalityIndicator::Infrared] {
        let idx = indices(&ev, m);
        if !idx.is_empty() {
            let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            acc_rows.push(format!("{m},{}", known_accuracy(&clf, &ev.select(&idx).data, &l)));
        }
    }
    write_text(&run.path("metrics/eval_accuracy.csv"), &csv("modality,accuracy", &acc_rows))?;

    let (emb, _) = clf.infer(&ev.data);
    let points = project_2d(&emb)?;
    let groups: Vec<Vec<[f64; 2]>> = [ModalityIndicator::Visible, ModalityIndicator::Infrared]
        .iter()
        .map(|&m| indices(&ev, m).iter().map(|&i| points[i]).collect())
        .collect();
    scatter_png(&run.path("images/eval_embeddings.png"), &groups, SCATTER_SIZE)?;
    Ok(())
}

pub fn gap_plot(run: &Run) -> CliResult {
    let (ev, _) = eval_data(run, None)?;
    let filter = run.cfg.denoiser.condition.unwrap_or_default();
    let (vis, ir) = (indices(&ev, ModalityIndicator::Visible), indices(&ev, ModalityIndicator::Infrared));
    let representations = [
        ("highpass", condition(&ev, &filter)?.data),
        ("lowpass", low_pass_reference(&ev, &filter.with_kind(FilterKind::LowpassGaussian))?.data),
    ];
    let mut rows = Vec::new();
    for (name, x) in &representations {
        let feats = gap_features(x)?;
        let gap = modality_gap(&feats.select(&vis), &feats.select(&ir))?;
        log::info!("{name} center distance {gap:.4}");
        rows.push(format!("{name},{gap}"));
        let points = project_2d(&feats)?;
        let groups = vec![
            vis.iter().map(|&i| points[i]).collect(),
            ir.iter().map(|&i| points[i]).collect(),
        ];
        scatter_png(&run.path(&format!("images/gap_{name}.png")), &groups, SCATTER_SIZE)?;
    }
    write_text(&run.path("metrics/gap.csv"), &csv("representation,center_distance", &rows))?;
    Ok(())
}

pub fn ablate(run: &Run, data: Option<&Path>, skip_condition: bool, limit: usize) -> CliResult {
    let s = reid_streams(run, data)?;
    let (ev, labels) = eval_data(run, None)?;
    let mut rows = Vec::new();
    for mode in LossMode::ALL {
        let loss = run.cfg.loss.with_mode(mode);
        let result = fit_reid(&s.real, &s.generated, s.num_classes, &loss, &run.cfg.reid)?;
        let acc = known_accuracy(&result.classifier, &ev.data, &labels);
        log::info!("{mode}: accuracy {acc:.3}");
        rows.push(format!("{},{},{acc}", u8::from(mode.uses_gce()), u8::from(mode.uses_lsr())));
    }
    write_text(&run.path("metrics/ablation_loss.csv"), &csv("GCE,LSR,accuracy", &rows))?;
    if skip_condition {
        return Ok(());
    }

    let model = denoiser(run, "ckpt/denoiser")?;
    let sched = run.cfg.train.schedule.build()?;
    let nocond_dir = run.path("ckpt/denoiser_nocond");
    let nocond = match load_denoiser(&nocond_dir) {
        Ok((p, _)) => p,
        Err(Error::MissingPath(_)) => {
            log::info!("training the indicator-only denoiser");
            let (images, _) = training_data(run, data)?;
            let cfg = run.cfg.denoiser.clone().without_condition();
            let init = DenoiserParams::init(&cfg, run.cfg.train.seed)?;
            let outputs = TrainOutputs {
                log_csv: run.path("logs/train_diff_nocond.csv"),
                ckpt_dir: nocond_dir,
            };
            train(&DiffusionDataset { images }, init, &run.cfg.train, Some(&outputs))?.params
        }
        Err(e) => return Err(CliError::checkpoint(e)),
    };
    let (images, manifest) = training_data(run, data)?;
    let source = run.cfg.data.labeled_modality;
    let target = source.flipped();
    let (src, _, _) = labeled(&images, &manifest, source)?;
    let src = first(&src, limit);
    let filter = model.config().condition.unwrap_or_default();
    let c_src = condition(&src, &filter)?.data;
    let with_condition = translate_all(&model, &sched, &src, target, &run.cfg.sampler)?;
    let partial = partial_noise_translate(&nocond, &sched, &src, target, None, &run.cfg.sampler)?;
    let scorer = scorer(run, &images)?;
    let mut rows = Vec::new();
    for (method, out) in [("translate", &with_condition), ("partial_noise", &partial)] {
        let ip = mean(&identity_preservation(out, &c_src, &filter)?);
        let acc = scorer.accuracy(&out.data, target);
        log::info!("{method}: identity preservation {ip:.3}, target modality {acc:.3}");
        rows.push(format!("{method},{ip},{acc}"));
    }
    write_text(
        &run.path("metrics/ablation_condition.csv"),
        &csv("method,identity_preservation,target_modality_accuracy", &rows),
    )?;
    grid_png(
        &run.path("images/ablation_condition.png"),
        &[&src.data, &c_src, &with_condition.data, &partial.data],
        GRID_ROWS.min(src.len()),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retarget_swaps_the_modality_directory() {
        assert_eq!(retarget("visible/0003/0001.png", ModalityIndicator::Infrared), "infrared/0003/0001.png");
        assert_eq!(retarget("a.png", ModalityIndicator::Visible), "visible/a.png");
    }

    #[test]
    fn csv_has_header_and_rows() {
        assert_eq!(csv("a,b", &["1,2".into()]), "a,b\n1,2\n");
    }
}
