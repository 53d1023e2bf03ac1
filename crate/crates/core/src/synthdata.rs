//! Procedural two-modality dataset and directory-structured ingestion.
//!
//! Every identity is a deterministic function of a seed: horizontal stripes, a few
//! soft blobs and a diagonal texture define a scalar intensity field. The visible
//! render colors that field with identity hues under a brightness jitter; the
//! infrared render replicates a gamma-mapped copy of the same field over three
//! channels and adds sensor noise. Geometry is therefore shared across modalities
//! while color is not.
//!
//! On disk a dataset lives at `<root>/<modality>/<identity>/<image>.png`, where the
//! identity directory `unknown` holds unlabeled images, and `<root>/manifest.csv`
//! lists `path,label,modality` lines.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::{ImageBatch, ModalityIndicator};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default `(height, width)`.
pub const DEFAULT_SIZE: (usize, usize) = (32, 64);
/// Infrared sensor noise standard deviation in `[-1, 1]` units.
pub const IR_NOISE_STD: f32 = 0.03;
/// Infrared noise is truncated at this many standard deviations.
pub const IR_NOISE_CLIP: f32 = 3.0;
pub const IR_GAMMA: f32 = 0.6;
/// Visible brightness jitter: factor uniform in `[1 - j, 1 + j]`.
pub const VIS_JITTER: f32 = 0.1;
const VIS_SATURATION: f32 = 0.6;
/// Maps `intensity * color` into `[0, 1]` for the worst-case hue and jitter.
const VIS_SCALE: f32 = 1.0 / (2.2 * (1.0 + VIS_JITTER));

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// Center row as a fraction of image height.
    pub row: f64,
    /// Center column as a fraction of image width.
    pub col: f64,
    /// Radius as a fraction of image height.
    pub radius: f64,
    /// Signed intensity offset inside the blob.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: u64,
    pub stripe_count: u32,
    pub stripe_phase: f64,
    pub blob_positions: Vec<Blob>,
    pub base_hue: f64,
    pub texture_frequency: f64,
}

impl IdentitySpec {
    /// Blobs lie inside the unit square (valid for any image at least as wide as tall).
    pub fn geometry_contained(&self) -> bool {
        self.blob_positions.iter().all(|b| {
            b.radius > 0.0
                && b.row - b.radius >= 0.0
                && b.row + b.radius <= 1.0
                && b.col - b.radius >= 0.0
                && b.col + b.radius <= 1.0
        })
    }

    fn intensity(&self, h: usize, w: usize) -> Vec<f32> {
        let mut field = vec![0.0f32; h * w];
        let tau = std::f64::consts::TAU;
        for y in 0..h {
            let fy = (y as f64 + 0.5) / h as f64;
            let stripe = (2.5 * (tau * self.stripe_count as f64 * fy + self.stripe_phase).sin()).tanh();
            for x in 0..w {
                let fx = (x as f64 + 0.5) / w as f64;
                let texture = (tau * self.texture_frequency * (fx + 0.5 * fy)).sin();
                let mut v = 0.5 + 0.22 * stripe + 0.08 * texture;
                for b in &self.blob_positions {
                    let dy = (fy - b.row) * h as f64;
                    let dx = (fx - b.col) * w as f64;
                    let d = (dy * dy + dx * dx).sqrt();
                    let cover = (b.radius * h as f64 - d + 0.5).clamp(0.0, 1.0);
                    v += b.amplitude * cover;
                }
                field[y * w + x] = v.clamp(0.02, 0.98) as f32;
            }
        }
        field
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed derivation from a tuple of components.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn generate_identity(seed: u64) -> IdentitySpec {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x1D]));
    let n_blobs = rng.random_range(2..=4);
    let blob_positions = (0..n_blobs)
        .map(|_| {
            let radius = rng.random_range(0.1..0.22);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Blob {
                row: rng.random_range(radius..1.0 - radius),
                col: rng.random_range(radius..1.0 - radius),
                radius,
                amplitude: sign * rng.random_range(0.2..0.3),
            }
        })
        .collect();
    IdentitySpec {
        id: seed,
        stripe_count: rng.random_range(2..=6),
        stripe_phase: rng.random_range(0.0..std::f64::consts::TAU),
        blob_positions,
        base_hue: rng.random_range(0.0..1.0),
        texture_frequency: rng.random_range(2.0..6.0),
    }
}

/// Fully saturated color for `hue`, scaled so its channel mean is 1.
fn hue_color(hue: f64) -> [f32; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let x = (1.0 - ((h % 2.0) - 1.0).abs()) as f32;
    let rgb = match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    };
    let mean = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
    rgb.map(|c| (1.0 - VIS_SATURATION) + VIS_SATURATION * c / mean)
}

/// Renders one `[1, 3, h, w]` image of `spec` in the given modality.
pub fn render<R: Rng>(
    spec: &IdentitySpec,
    modality: ModalityIndicator,
    rng: &mut R,
    size: (usize, usize),
) -> Result<ImageBatch> {
    let (h, w) = size;
    let field = spec.intensity(h, w);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    match modality {
        ModalityIndicator::Visible => {
            let jitter = 1.0 + rng.random_range(-VIS_JITTER..VIS_JITTER);
            let upper = hue_color(spec.base_hue);
            let lower = hue_color(spec.base_hue + 0.5);
            let blob = hue_color(spec.base_hue + 0.25);
            for y in 0..h {
                for x in 0..w {
                    let fy = (y as f64 + 0.5) / h as f64;
                    let fx = (x as f64 + 0.5) / w as f64;
                    let in_blob = spec.blob_positions.iter().any(|b| {
                        let dy = (fy - b.row) * h as f64;
                        let dx = (fx - b.col) * w as f64;
                        (dy * dy + dx * dx).sqrt() <= b.radius * h as f64
                    });
                    let color = if in_blob {
                        blob
                    } else if y < h / 2 {
                        upper
                    } else {
                        lower
                    };
                    let i = field[y * w + x];
                    for (ch, k) in color.iter().enumerate() {
                        let v = (jitter * i * k * VIS_SCALE).clamp(0.0, 1.0);
                        data[ch * plane + y * w + x] = 2.0 * v - 1.0;
                    }
                }
            }
        }
        ModalityIndicator::Infrared => {
            let noise = Normal::new(0.0f32, IR_NOISE_STD).expect("valid std");
            let bound = IR_NOISE_CLIP * IR_NOISE_STD;
            for p in 0..plane {
                let base = 2.0 * field[p].powf(IR_GAMMA) - 1.0;
                let n = noise.sample(rng).clamp(-bound, bound);
                let v = (base + n).clamp(-1.0, 1.0);
                for ch in 0..3 {
                    data[ch * plane + p] = v;
                }
            }
        }
        ModalityIndicator::Null => {
            return Err(Error::Contract("cannot render the null modality".into()));
        }
    }
    ImageBatch::new(Tensor::from_vec(&[1, 3, h, w], data)?, vec![modality])
}

/// Images with modality tags only; carries no labels and no cross-modality links.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionDataset {
    pub images: ImageBatch,
}

impl DiffusionDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn count(&self, m: ModalityIndicator) -> usize {
        self.images.modality.iter().filter(|&&x| x == m).count()
    }

    pub fn indices_of(&self, m: ModalityIndicator) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.images.modality[i] == m).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root.
    pub path: String,
    /// Identity label; `None` is the missing label.
    pub label: Option<usize>,
    pub modality: ModalityIndicator,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub const HEADER: &'static str = "path,label,modality";

    pub fn count(&self, m: ModalityIndicator) -> usize {
        self.entries.iter().filter(|e| e.modality == m).count()
    }

    pub fn identities(&self, m: ModalityIndicator) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .entries
            .iter()
            .filter(|e| e.modality == m)
            .filter_map(|e| e.label)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for e in &self.entries {
            let label = e.label.map_or_else(|| "unknown".to_string(), |l| l.to_string());
            out.push_str(&format!("{},{},{}\n", e.path, label, e.modality));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || (n == 0 && line == Self::HEADER) {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!("manifest line {}: `{line}`", n + 1)));
            }
            let label = match parts[1] {
                "unknown" => None,
                s => Some(s.parse().map_err(|_| {
                    Error::Config(format!("manifest line {}: bad label `{s}`", n + 1))
                })?),
            };
            entries.push(ManifestEntry {
                path: parts[0].to_string(),
                label,
                modality: parts[2].parse()?,
            });
        }
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub per_id: usize,
    pub labeled_modality: ModalityIndicator,
    /// Fraction of identities present in both modalities.
    pub id_overlap: f64,
    pub size: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_ids: 8,
            per_id: 8,
            labeled_modality: ModalityIndicator::Visible,
            id_overlap: 1.0,
            size: DEFAULT_SIZE,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_id == 0 {
            return Err(Error::Config("per_id must be at least 1".into()));
        }
        if self.n_ids < 2 {
            return Err(Error::Config("need at least two identities".into()));
        }
        if !self.labeled_modality.is_data_modality() {
            return Err(Error::Config("labeled modality must be visible or infrared".into()));
        }
        if !(0.0..=1.0).contains(&self.id_overlap) {
            return Err(Error::Config("id_overlap must lie in [0, 1]".into()));
        }
        if self.size.0 == 0 || self.size.1 == 0 {
            return Err(Error::Config("image size must be non-zero".into()));
        }
        Ok(())
    }
}

/// Identity seed for identity `id` of a dataset built from `seed`.
pub fn identity_seed(seed: u64, id: usize) -> u64 {
    derive_seed(&[seed, id as u64, 0x1D5])
}

/// Splits identities into the two modality sets.
///
/// `round(overlap * n_ids)` randomly chosen identities are shared; the rest are
/// dealt alternately, starting with the labeled modality. Returns
/// `(labeled_ids, unlabeled_ids)`, each sorted.
pub fn split_identities(n_ids: usize, overlap: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n_ids).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x0F])));
    let shared = ((overlap * n_ids as f64).round() as usize).min(n_ids);
    let (mut labeled, mut unlabeled): (Vec<usize>, Vec<usize>) =
        (order[..shared].to_vec(), order[..shared].to_vec());
    for (k, &id) in order[shared..].iter().enumerate() {
        if k % 2 == 0 {
            labeled.push(id);
        } else {
            unlabeled.push(id);
        }
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    (labeled, unlabeled)
}

/// Renders `per_id` images for every `(identity, modality)` pair requested.
fn render_set(
    cfg: &SynthConfig,
    plan: &[(ModalityIndicator, Vec<usize>)],
    labels_for: impl Fn(ModalityIndicator, usize) -> Option<usize>,
    salt: u64,
) -> Result<(ImageBatch, DatasetManifest)> {
    let mut parts = Vec::new();
    let mut entries = Vec::new();
    for (modality, ids) in plan {
        for &id in ids {
            let spec = generate_identity(identity_seed(cfg.seed, id));
            for k in 0..cfg.per_id {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                    cfg.seed,
                    salt,
                    modality.index() as u64,
                    id as u64,
                    k as u64,
                ]));
                parts.push(render(&spec, *modality, &mut rng, cfg.size)?);
                let label = labels_for(*modality, id);
                let dir = label.map_or_else(|| "unknown".to_string(), |l| l.to_string());
                let file = if label.is_some() { format!("{k:04}.png") } else { format!("{id:04}_{k:04}.png") };
                entries.push(ManifestEntry {
                    path: format!("{modality}/{dir}/{file}"),
                    label,
                    modality: *modality,
                });
            }
        }
    }
    let refs: Vec<&ImageBatch> = parts.iter().collect();
    Ok((ImageBatch::concat(&refs)?, DatasetManifest { entries }))
}

/// Single-modality labeled dataset: the labeled modality carries identity labels, the
/// other modality carries the missing label.
pub fn build_single_modality_dataset(cfg: &SynthConfig) -> Result<(DiffusionDataset, DatasetManifest)> {
    cfg.validate()?;
    let labeled = cfg.labeled_modality;
    let (lab_ids, unl_ids) = split_identities(cfg.n_ids, cfg.id_overlap, cfg.seed);
    let plan = vec![(labeled, lab_ids), (labeled.flipped(), unl_ids)];
    let (images, manifest) = render_set(cfg, &plan, |m, id| (m == labeled).then_some(id), 0x7A)?;
    Ok((DiffusionDataset { images }, manifest))
}

/// Salt of the renders returned by [`build_eval_set`].
pub const EVAL_SALT: u64 = 0xE7;

/// Held-out renders of every identity in both modalities, all labeled. These form the
/// ground-truth cross-modality pairs and are only used for evaluation.
pub fn build_eval_set(cfg: &SynthConfig) -> Result<(ImageBatch, DatasetManifest)> {
    build_labeled_set(cfg, EVAL_SALT)
}

/// Every identity in both modalities, all labeled; different `salt` values give
/// independent renders of the same identities.
pub fn build_labeled_set(cfg: &SynthConfig, salt: u64) -> Result<(ImageBatch, DatasetManifest)> {
    if cfg.per_id == 0 {
        return Err(Error::Config("per_id must be at least 1".into()));
    }
    let ids: Vec<usize> = (0..cfg.n_ids).collect();
    let plan = vec![
        (ModalityIndicator::Visible, ids.clone()),
        (ModalityIndicator::Infrared, ids),
    ];
    render_set(cfg, &plan, |_, id| Some(id), salt)
}

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

/// Writes one `[1|3, h, w]` image item as an 8-bit RGB PNG.
pub fn save_png(path: &Path, item: &[f32], channels: usize, h: usize, w: usize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let plane = h * w;
    let mut buf = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            let src = if channels == 1 { 0 } else { ch };
            buf.push(to_u8(item[src * plane + p]));
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8).map_err(|source| {
        Error::Image {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// Reads a PNG as a `[3, h, w]` item in `[-1, 1]`, resized if needed.
pub fn load_png(path: &Path, size: (usize, usize)) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (h, w) = size;
    let img = if img.width() as usize != w || img.height() as usize != h {
        img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let rgb = img.to_rgb8();
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for (p, px) in rgb.pixels().enumerate() {
        for ch in 0..3 {
            out[ch * plane + p] = from_u8(px.0[ch]);
        }
    }
    Ok(out)
}

/// Writes images and `manifest.csv` under `root`.
pub fn write_dataset(root: &Path, images: &ImageBatch, manifest: &DatasetManifest) -> Result<()> {
    if images.len() != manifest.entries.len() {
        return Err(Error::Contract("manifest and images differ in length".into()));
    }
    for (i, e) in manifest.entries.iter().enumerate() {
        save_png(&root.join(&e.path), images.data.item(i), images.channels(), images.height(), images.width())?;
    }
    write_text(&root.join("manifest.csv"), &manifest.to_csv())
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads the images listed in `<root>/manifest.csv`, in manifest order.
pub fn load_manifest_dataset(root: &Path, size: (usize, usize)) -> Result<(ImageBatch, DatasetManifest)> {
    let path = root.join("manifest.csv");
    if !path.is_file() {
        return Err(Error::MissingPath(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = DatasetManifest::parse_csv(&text)?;
    if manifest.entries.is_empty() {
        return Err(Error::Empty(format!("{} lists no images", path.display())));
    }
    let (h, w) = size;
    let mut data = Vec::with_capacity(manifest.entries.len() * 3 * h * w);
    for e in &manifest.entries {
        data.extend(load_png(&root.join(&e.path), size)?);
    }
    let modalities = manifest.entries.iter().map(|e| e.modality).collect();
    let n = manifest.entries.len();
    let images = ImageBatch::new(Tensor::from_vec(&[n, 3, h, w], data)?, modalities)?;
    Ok((images, manifest))
}

fn sorted_children(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads `<root>/<modality>/<identity>/<image>.png`; `unknown` identity directories
/// carry the missing label. Unreadable files are skipped with a warning.
pub fn load_directory_dataset(root: &Path, size: (usize, usize)) -> Result<(DiffusionDataset, DatasetManifest)> {
    let mut items = Vec::new();
    let mut modalities = Vec::new();
    let mut entries = Vec::new();
    let data_modalities = [ModalityIndicator::Visible, ModalityIndicator::Infrared];
    for modality in data_modalities {
        let mdir = root.join(modality.as_str());
        if !mdir.is_dir() {
            return Err(Error::MissingPath(mdir));
        }
    }
    for modality in data_modalities {
        let mdir = root.join(modality.as_str());
        let mut id_dirs: Vec<(Option<usize>, PathBuf)> = Vec::new();
        for p in sorted_children(&mdir)? {
            if !p.is_dir() {
                continue;
            }
            let name = p.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            match name.as_str() {
                "unknown" => id_dirs.push((None, p)),
                s => match s.parse::<usize>() {
                    Ok(id) => id_dirs.push((Some(id), p)),
                    Err(_) => log::warn!("skipping non-identity directory {}", p.display()),
                },
            }
        }
        id_dirs.sort_by_key(|(id, _)| id.map_or(usize::MAX, |v| v));
        let before = items.len();
        for (label, dir) in id_dirs {
            for file in sorted_children(&dir)? {
                if file.extension().and_then(|s| s.to_str()) != Some("png") {
                    continue;
                }
                match load_png(&file, size) {
                    Ok(pixels) => {
                        let rel = file.strip_prefix(root).unwrap_or(&file);
                        entries.push(ManifestEntry {
                            path: rel.to_string_lossy().replace('\\', "/"),
                            label,
                            modality,
                        });
                        items.push(pixels);
                        modalities.push(modality);
                    }
                    Err(e) => log::warn!("skipping unreadable image: {e}"),
                }
            }
        }
        if items.len() == before {
            return Err(Error::Empty(format!("no images under {}", mdir.display())));
        }
    }
    let (h, w) = size;
    let data: Vec<f32> = items.into_iter().flatten().collect();
    let n = modalities.len();
    let images = ImageBatch::new(Tensor::from_vec(&[n, 3, h, w], data)?, modalities)?;
    Ok((DiffusionDataset { images }, DatasetManifest { entries }))
}
