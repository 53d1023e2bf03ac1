//! Evaluation: retrieval metrics, modality gap, identity preservation, modality
//! scoring, a toy re-identification classifier and projection plots.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::batch::{luminance, ImageBatch, ModalityIndicator};
use crate::conditioning::{condition, FilterConfig};
use crate::error::{Error, Result};
use crate::labels::{mixed_objective, LossConfig, Provenance};
use crate::nn::{Conv2d, Linear};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Feature vectors with identity labels and modality tags.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    /// `[N, d]`.
    pub vectors: Tensor<f32>,
    pub labels: Vec<usize>,
    pub modality: Vec<ModalityIndicator>,
}

impl EmbeddingSet {
    pub fn new(vectors: Tensor<f32>, labels: Vec<usize>, modality: Vec<ModalityIndicator>) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::Shape(format!("embeddings must be [N, d], got {:?}", vectors.shape())));
        }
        let n = vectors.dim(0);
        if labels.len() != n || modality.len() != n {
            return Err(Error::Shape(format!(
                "{n} vectors, {} labels, {} modality tags",
                labels.len(),
                modality.len()
            )));
        }
        if !vectors.all_finite() {
            return Err(Error::Contract("embeddings contain non-finite values".into()));
        }
        Ok(Self {
            vectors,
            labels,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.vectors.item(i)
    }

    fn l2_normalized(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| {
                let r = self.row(i);
                let norm = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                r.iter().map(|&v| if norm > 0.0 { v as f64 / norm } else { 0.0 }).collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// `(k, rank-k accuracy)` in the order requested.
    pub rank_k: Vec<(usize, f64)>,
    pub map: f64,
    /// Queries skipped for lack of a same-label gallery item.
    pub excluded: usize,
}

impl RetrievalMetrics {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.rank_k.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// Cosine distance between rows of `queries` and `gallery`.
pub fn cosine_distances(queries: &EmbeddingSet, gallery: &EmbeddingSet) -> Vec<Vec<f64>> {
    let q = queries.l2_normalized();
    let g = gallery.l2_normalized();
    q.iter()
        .map(|qi| g.iter().map(|gj| 1.0 - qi.iter().zip(gj).map(|(a, b)| a * b).sum::<f64>()).collect())
        .collect()
}

/// CMC rank-k and mAP from a precomputed `[queries][gallery]` distance matrix.
///
/// Equal distances are ranked negatives first, so the result does not depend on
/// gallery order.
pub fn cmc_map_from_distances(
    dist: &[Vec<f64>],
    query_labels: &[usize],
    gallery_labels: &[usize],
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    if dist.len() != query_labels.len() {
        return Err(Error::Shape("distance rows and query labels differ".into()));
    }
    let mut hits = vec![0usize; ks.len()];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    let mut excluded = 0usize;
    for (row, &ql) in dist.iter().zip(query_labels) {
        if row.len() != gallery_labels.len() {
            return Err(Error::Shape("distance columns and gallery labels differ".into()));
        }
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            row[a]
                .total_cmp(&row[b])
                .then_with(|| (gallery_labels[a] == ql).cmp(&(gallery_labels[b] == ql)))
        });
        let positives = gallery_labels.iter().filter(|&&l| l == ql).count();
        if positives == 0 {
            excluded += 1;
            continue;
        }
        valid += 1;
        let first_hit = order.iter().position(|&j| gallery_labels[j] == ql).expect("has positive");
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first_hit < k {
                *h += 1;
            }
        }
        let mut found = 0usize;
        let mut ap = 0.0;
        for (rank, &j) in order.iter().enumerate() {
            if gallery_labels[j] == ql {
                found += 1;
                ap += found as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += ap / positives as f64;
    }
    if excluded > 0 {
        log::warn!("{excluded} queries have no positive gallery item and were excluded");
    }
    if valid == 0 {
        return Err(Error::Empty("no query has a positive gallery item".into()));
    }
    Ok(RetrievalMetrics {
        rank_k: ks.iter().zip(&hits).map(|(&k, &h)| (k, h as f64 / valid as f64)).collect(),
        map: ap_sum / valid as f64,
        excluded,
    })
}

/// Retrieval with cosine distance on L2-normalized embeddings.
pub fn cmc_map(queries: &EmbeddingSet, gallery: &EmbeddingSet, ks: &[usize]) -> Result<RetrievalMetrics> {
    if queries.dim() != gallery.dim() {
        return Err(Error::Shape("query and gallery dimensions differ".into()));
    }
    let dist = cosine_distances(queries, gallery);
    cmc_map_from_distances(&dist, &queries.labels, &gallery.labels, ks)
}

fn center(set: &[&[f32]]) -> Vec<f64> {
    let d = set[0].len();
    let mut c = vec![0.0; d];
    for row in set {
        for (a, &v) in c.iter_mut().zip(row.iter()) {
            *a += v as f64;
        }
    }
    c.iter_mut().for_each(|v| *v /= set.len() as f64);
    c
}

/// Euclidean distance between the mean vectors of two feature sets.
pub fn modality_gap(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.dim(0) == 0 || b.dim(0) == 0 {
        return Err(Error::Empty("modality gap needs two non-empty sets".into()));
    }
    if a.item_len() != b.item_len() {
        return Err(Error::Shape("feature dimensions differ".into()));
    }
    let rows = |t: &Tensor<f32>| (0..t.dim(0)).map(|i| t.item(i).to_vec()).collect::<Vec<_>>();
    let (ra, rb) = (rows(a), rows(b));
    let ca = center(&ra.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let cb = center(&rb.iter().map(Vec::as_slice).collect::<Vec<_>>());
    Ok(ca.iter().zip(&cb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Side of the pooling grid used for gap features.
pub const GAP_GRID: usize = 8;

/// Fixed features: luminance averaged over an 8x8 grid of cells, `[N, 64]`.
pub fn gap_features(images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 || !s[2].is_multiple_of(GAP_GRID) || !s[3].is_multiple_of(GAP_GRID) {
        return Err(Error::Shape(format!("images {s:?} must be [N, C, H, W] with H, W divisible by {GAP_GRID}")));
    }
    let lum = luminance(images);
    let (n, h, w) = (s[0], s[2], s[3]);
    let (ch, cw) = (h / GAP_GRID, w / GAP_GRID);
    let mut out = Vec::with_capacity(n * GAP_GRID * GAP_GRID);
    for i in 0..n {
        let plane = lum.item(i);
        for gy in 0..GAP_GRID {
            for gx in 0..GAP_GRID {
                let mut acc = 0.0f64;
                for y in gy * ch..(gy + 1) * ch {
                    acc += plane[y * w + gx * cw..y * w + (gx + 1) * cw].iter().map(|&v| v as f64).sum::<f64>();
                }
                out.push((acc / (ch * cw) as f64) as f32);
            }
        }
    }
    Tensor::from_vec(&[n, GAP_GRID * GAP_GRID], out)
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson: length mismatch");
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 1e-24 || sbb <= 1e-24 {
        log::warn!("zero-variance input to a correlation; scoring 0");
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Per-item correlation between the condition of `x_gen` and `c_src` (`[N, 1, H, W]`).
pub fn identity_preservation(x_gen: &ImageBatch, c_src: &Tensor<f32>, filter: &FilterConfig) -> Result<Vec<f64>> {
    let cg = condition(x_gen, filter)?.data;
    cg.expect_same_shape(c_src)?;
    Ok((0..x_gen.len()).map(|i| pearson(cg.item(i), c_src.item(i))).collect())
}

/// Scores for `pairs` random mismatched pairs `(generated i, source j)` with different
/// identity labels.
pub fn shuffled_identity_null(
    x_gen: &ImageBatch,
    c_src: &Tensor<f32>,
    labels: &[usize],
    filter: &FilterConfig,
    pairs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let cg = condition(x_gen, filter)?.data;
    cg.expect_same_shape(c_src)?;
    let n = x_gen.len();
    if labels.len() != n {
        return Err(Error::Shape("one label per generated image is required".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Contract("null pairs need at least two identities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs);
    while out.len() < pairs {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        if labels[i] != labels[j] {
            out.push(pearson(cg.item(i), c_src.item(j)));
        }
    }
    Ok(out)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean over pixels of the channel range `max - min`, per item.
pub fn channel_saturation(x: &Tensor<f32>) -> Vec<f64> {
    let s = x.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    (0..n)
        .map(|i| {
            if c == 1 {
                return 0.0;
            }
            let item = x.item(i);
            let total: f64 = (0..plane)
                .map(|p| {
                    let (lo, hi) = (0..c).fold((f32::MAX, f32::MIN), |(lo, hi), ch| {
                        let v = item[ch * plane + p];
                        (lo.min(v), hi.max(v))
                    });
                    (hi - lo) as f64
                })
                .sum();
            total / plane as f64
        })
        .collect()
}

/// Visible/infrared decision by channel saturation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityScorer {
    pub threshold: f64,
}

impl ModalityScorer {
    /// Midpoint between the most saturated infrared and least saturated visible
    /// example, or between class means when the two overlap.
    pub fn calibrate(visible: &Tensor<f32>, infrared: &Tensor<f32>) -> Result<Self> {
        let sv = channel_saturation(visible);
        let si = channel_saturation(infrared);
        if sv.is_empty() || si.is_empty() {
            return Err(Error::Empty("calibration needs both modalities".into()));
        }
        let vis_min = sv.iter().copied().fold(f64::INFINITY, f64::min);
        let ir_max = si.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let threshold = if ir_max < vis_min {
            0.5 * (ir_max + vis_min)
        } else {
            log::warn!("modality calibration sets overlap; using the midpoint of means");
            0.5 * (mean(&sv) + mean(&si))
        };
        Ok(Self { threshold })
    }

    pub fn classify(&self, x: &Tensor<f32>) -> Vec<ModalityIndicator> {
        channel_saturation(x)
            .into_iter()
            .map(|s| {
                if s > self.threshold {
                    ModalityIndicator::Visible
                } else {
                    ModalityIndicator::Infrared
                }
            })
            .collect()
    }

    /// Fraction of items classified as `target`.
    pub fn accuracy(&self, x: &Tensor<f32>, target: ModalityIndicator) -> f64 {
        let labels = self.classify(x);
        labels.iter().filter(|&&m| m == target).count() as f64 / labels.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReidConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub channels: usize,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for ReidConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            channels: 16,
            embedding_dim: 32,
            seed: 0,
        }
    }
}

impl ReidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.channels == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("batch_size, channels and embedding_dim must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Two stride-2 convolutions, global pooling, an embedding layer and a linear
/// identity head.
#[derive(Debug, Clone)]
pub struct ToyClassifier {
    pub store: ParamStore<f32>,
    conv1: Conv2d,
    conv2: Conv2d,
    embed: Linear,
    head: Linear,
    pub num_classes: usize,
    pub in_channels: usize,
    pub embedding_dim: usize,
}

impl ToyClassifier {
    pub fn new(in_channels: usize, num_classes: usize, cfg: &ReidConfig) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC1A5);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let conv1 = Conv2d::new(&mut store, "conv1", in_channels, c, 3, 2, 1, &mut rng)?;
        let conv2 = Conv2d::new(&mut store, "conv2", c, 2 * c, 3, 2, 1, &mut rng)?;
        let embed = Linear::new(&mut store, "embed", 2 * c, cfg.embedding_dim, &mut rng)?;
        let head = Linear::new(&mut store, "head", cfg.embedding_dim, num_classes, &mut rng)?;
        Ok(Self {
            store,
            conv1,
            conv2,
            embed,
            head,
            num_classes,
            in_channels,
            embedding_dim: cfg.embedding_dim,
        })
    }

    /// Rebuilds the layer inventory and adopts `store` as its values.
    pub fn from_store(in_channels: usize, num_classes: usize, cfg: &ReidConfig, store: &ParamStore<f32>) -> Result<Self> {
        let mut clf = Self::new(in_channels, num_classes, cfg)?;
        clf.store.load_from(store)?;
        Ok(clf)
    }

    fn forward(&self, g: &mut Graph<f32>, x: Var) -> (Var, Var) {
        let h = self.conv1.forward(g, x);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        let h = g.relu(h);
        let h = g.global_avg_pool(h);
        let emb = self.embed.forward(g, h);
        let a = g.relu(emb);
        let logits = self.head.forward(g, a);
        (emb, logits)
    }

    /// `(embeddings [N, d], logits [N, K])`.
    pub fn infer(&self, x: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
        let mut embs = Vec::new();
        let mut logits = Vec::new();
        for start in (0..x.dim(0)).step_by(64) {
            let idx: Vec<usize> = (start..(start + 64).min(x.dim(0))).collect();
            let mut g = Graph::inference(&self.store);
            let xi = g.input(x.select(&idx));
            let (e, l) = self.forward(&mut g, xi);
            embs.push(g.value(e).clone());
            logits.push(g.value(l).clone());
        }
        let cat = |parts: Vec<Tensor<f32>>, d: usize| {
            let data: Vec<f32> = parts.into_iter().flat_map(Tensor::into_data).collect();
            let n = data.len() / d;
            Tensor::from_vec(&[n, d], data).expect("consistent widths")
        };
        let d = self.embedding_dim;
        (cat(embs, d), cat(logits, self.num_classes))
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Vec<usize> {
        let (_, logits) = self.infer(x);
        (0..logits.dim(0))
            .map(|i| {
                let row = logits.item(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect()
    }

    pub fn accuracy(&self, x: &Tensor<f32>, labels: &[usize]) -> f64 {
        let pred = self.predict(x);
        pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
    }

    pub fn embed_set(&self, x: &ImageBatch, labels: &[usize]) -> Result<EmbeddingSet> {
        let (emb, _) = self.infer(&x.data);
        EmbeddingSet::new(emb, labels.to_vec(), x.modality.clone())
    }
}

/// Labeled images for classifier training.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ReidResult {
    pub classifier: ToyClassifier,
    pub losses: Vec<f64>,
}

/// Trains a classifier on real labeled images plus generated images whose labels
/// were assigned from their sources. Real items always use cross-entropy; generated
/// items use the objective selected by `loss.mode`.
pub fn train_reid(
    real: &LabeledImages,
    generated: &LabeledImages,
    num_classes: usize,
    loss: &LossConfig,
    cfg: &ReidConfig,
) -> Result<ReidResult> {
    if real.is_empty() && generated.is_empty() {
        return Err(Error::Empty("no training images for the classifier".into()));
    }
    cfg.validate()?;
    if real.labels.iter().chain(&generated.labels).any(|&l| l >= num_classes) {
        return Err(Error::Contract(format!("labels must be below {num_classes}")));
    }
    if !real.is_empty() && !generated.is_empty() {
        let overlap = generated.labels.iter().any(|l| real.labels.contains(l));
        if !overlap {
            log::warn!("real and generated identity sets are disjoint");
        }
    }
    let first = if real.is_empty() { &generated.images } else { &real.images };
    let mut clf = ToyClassifier::new(first.dim(1), num_classes, cfg)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &clf.store,
    );
    let pool: Vec<(Provenance, usize)> = (0..real.len())
        .map(|i| (Provenance::Real, i))
        .chain((0..generated.len()).map(|i| (Provenance::Generated, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5E1D);
    let mut order: Vec<(Provenance, usize)> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut items = Vec::with_capacity(cfg.batch_size);
        while items.len() < cfg.batch_size.min(pool.len()) {
            if order.is_empty() {
                order = pool.clone();
                order.shuffle(&mut rng);
            }
            items.push(order.pop().expect("refilled"));
        }
        let parts: Vec<Tensor<f32>> = items
            .iter()
            .map(|&(p, i)| match p {
                Provenance::Real => real.images.select(&[i]),
                Provenance::Generated => generated.images.select(&[i]),
            })
            .collect();
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        let x = Tensor::stack(&refs)?;
        let labels: Vec<usize> = items
            .iter()
            .map(|&(p, i)| match p {
                Provenance::Real => real.labels[i],
                Provenance::Generated => generated.labels[i],
            })
            .collect();
        let prov: Vec<Provenance> = items.iter().map(|&(p, _)| p).collect();
        let mut g = Graph::new(&clf.store);
        let xv = g.input(x);
        let (_, logits) = clf.forward(&mut g, xv);
        let obj = mixed_objective(g.value(logits), &labels, &prov, loss)?;
        let root = g.external_loss(logits, obj.loss as f32, obj.grad);
        let grads = g.backward(root).into_param_grads(clf.store.len());
        drop(g);
        opt.step(&mut clf.store, &grads);
        losses.push(obj.loss);
    }
    Ok(ReidResult {
        classifier: clf,
        losses,
    })
}

/// Replaces a fraction `rate` of labels with a different, uniformly chosen class.
pub fn symmetric_label_noise(labels: &[usize], num_classes: usize, rate: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.shuffle(&mut rng);
    let flips = (rate * labels.len() as f64).round() as usize;
    let mut out = labels.to_vec();
    if num_classes < 2 {
        return out;
    }
    for &i in &idx[..flips.min(labels.len())] {
        let shift = rng.random_range(1..num_classes);
        out[i] = (labels[i] + shift) % num_classes;
    }
    out
}

/// Tiles `[N, C, H, W]` batches side by side: one column per batch, one row per item.
/// One-channel batches are drawn in gray.
pub fn grid_png(path: &Path, columns: &[&Tensor<f32>], rows: usize) -> Result<()> {
    let first = columns.first().ok_or_else(|| Error::Empty("grid needs at least one column".into()))?;
    let (h, w) = (first.dim(2), first.dim(3));
    if columns.iter().any(|c| c.shape().len() != 4 || c.dim(2) != h || c.dim(3) != w) {
        return Err(Error::Shape("grid columns must share spatial size".into()));
    }
    let rows = columns.iter().map(|c| c.dim(0)).fold(rows, usize::min);
    if rows == 0 {
        return Err(Error::Empty("nothing to tile".into()));
    }
    let gap = 2;
    let (gw, gh) = (columns.len() * (w + gap) - gap, rows * (h + gap) - gap);
    let mut img = image::RgbImage::from_pixel(gw as u32, gh as u32, image::Rgb([255, 255, 255]));
    let plane = h * w;
    for (ci, col) in columns.iter().enumerate() {
        let c = col.dim(1);
        for r in 0..rows {
            let item = col.item(r);
            for y in 0..h {
                for x in 0..w {
                    let px = |ch: usize| {
                        let v = item[ch.min(c - 1) * plane + y * w + x].clamp(-1.0, 1.0);
                        ((v + 1.0) * 0.5 * 255.0).round() as u8
                    };
                    let (ox, oy) = (ci * (w + gap) + x, r * (h + gap) + y);
                    img.put_pixel(ox as u32, oy as u32, image::Rgb([px(0), px(1), px(2)]));
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Projection of `[N, d]` features onto their two leading principal directions.
pub fn project_2d(features: &Tensor<f32>) -> Result<Vec<[f64; 2]>> {
    let (n, d) = (features.dim(0), features.item_len());
    if n < 2 {
        return Err(Error::Empty("projection needs at least two points".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features.item(i)[j] as f64);
    let means = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - means[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<_> = order.iter().take(2).map(|&k| eig.eigenvectors.column(k).into_owned()).collect();
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let p = |k: usize| axes.get(k).map_or(0.0, |a| row.iter().zip(a.iter()).map(|(x, y)| x * y).sum());
            [p(0), p(1)]
        })
        .collect())
}

const PALETTE: [[u8; 3]; 6] = [
    [220, 60, 50],
    [40, 110, 210],
    [40, 160, 80],
    [230, 150, 30],
    [140, 70, 180],
    [90, 90, 90],
];

/// Draws point groups as colored squares on a white canvas.
pub fn scatter_png(path: &Path, groups: &[Vec<[f64; 2]>], size: u32) -> Result<()> {
    let pts: Vec<&[f64; 2]> = groups.iter().flatten().collect();
    if pts.is_empty() {
        return Err(Error::Empty("nothing to plot".into()));
    }
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in &pts {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = |k: usize| (hi[k] - lo[k]).max(1e-12);
    let margin = 8.0;
    let usable = size as f64 - 2.0 * margin;
    let mut img = image::RgbImage::from_pixel(size, size, image::Rgb([255, 255, 255]));
    for (gi, group) in groups.iter().enumerate() {
        let color = image::Rgb(PALETTE[gi % PALETTE.len()]);
        for p in group {
            let cx = margin + (p[0] - lo[0]) / span(0) * usable;
            let cy = margin + (1.0 - (p[1] - lo[1]) / span(1)) * usable;
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let (x, y) = (cx as i64 + dx, cy as i64 + dy);
                    if x >= 0 && y >= 0 && (x as u32) < size && (y as u32) < size {
                        img.put_pixel(x as u32, y as u32, color);
                    }
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::ModalityIndicator::{Infrared, Visible};
    use proptest::prelude::*;

    fn set(rows: &[&[f32]], labels: &[usize]) -> EmbeddingSet {
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EmbeddingSet::new(Tensor::from_vec(&[rows.len(), d], data).unwrap(), labels.to_vec(), vec![Visible; rows.len()]).unwrap()
    }

    #[test]
    fn single_correct_neighbor_is_perfect() {
        let q = set(&[&[1.0, 0.0]], &[3]);
        let g = set(&[&[0.9, 0.1], &[0.0, 1.0]], &[3, 4]);
        let m = cmc_map(&q, &g, &[1]).unwrap();
        assert_eq!(m.rank(1), Some(1.0));
        assert_eq!(m.map, 1.0);
    }

    #[test]
    fn hand_enumerated_two_query_fixture() {
        // query 0 (label 0): positives at ranks 1 and 3; query 1 (label 1): positive at rank 2
        let dist = vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.1, 0.2, 0.3, 0.4]];
        let gallery = [0, 1, 0, 2];
        let m = cmc_map_from_distances(&dist, &[0, 1], &gallery, &[1, 2, 3]).unwrap();
        let want = ((1.0 + 2.0 / 3.0) / 2.0 + 0.5) / 2.0;
        assert!((m.map - want).abs() < 1e-12);
        assert_eq!(m.rank(1), Some(0.5));
        assert_eq!(m.rank(2), Some(1.0));
    }

    #[test]
    fn queries_without_positives_are_excluded() {
        let dist = vec![vec![0.1, 0.2], vec![0.3, 0.1]];
        let m = cmc_map_from_distances(&dist, &[0, 7], &[0, 1], &[1]).unwrap();
        assert_eq!(m.excluded, 1);
        assert_eq!(m.map, 1.0);
        assert!(cmc_map_from_distances(&[vec![0.1]], &[5], &[0], &[1]).is_err());
    }

    #[test]
    fn ties_rank_negatives_first() {
        let m = cmc_map_from_distances(&[vec![0.5, 0.5]], &[1], &[1, 0], &[1]).unwrap();
        assert_eq!(m.rank(1), Some(0.0));
        assert_eq!(m.map, 0.5);
    }

    proptest! {
        #[test]
        fn retrieval_is_order_free_and_monotone(
            seed in 0u64..1000,
            monotone_scale in 0.1f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (nq, ng) = (4, 9);
            let dist: Vec<Vec<f64>> = (0..nq).map(|_| (0..ng).map(|_| (rng.random_range(0..5) as f64) * 0.1).collect()).collect();
            let ql: Vec<usize> = (0..nq).map(|i| i % 3).collect();
            let gl: Vec<usize> = (0..ng).map(|j| j % 3).collect();
            let ks = [1, 3, 5, 9];
            let base = cmc_map_from_distances(&dist, &ql, &gl, &ks).unwrap();
            let mut perm: Vec<usize> = (0..ng).collect();
            perm.shuffle(&mut rng);
            let pd: Vec<Vec<f64>> = dist.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
            let pl: Vec<usize> = perm.iter().map(|&j| gl[j]).collect();
            prop_assert_eq!(&cmc_map_from_distances(&pd, &ql, &pl, &ks).unwrap(), &base);
            let td: Vec<Vec<f64>> = dist.iter().map(|r| r.iter().map(|&d| (monotone_scale * d).exp()).collect()).collect();
            prop_assert_eq!(&cmc_map_from_distances(&td, &ql, &gl, &ks).unwrap(), &base);
            prop_assert!(base.rank_k.windows(2).all(|w| w[0].1 <= w[1].1));
            prop_assert!((0.0..=1.0).contains(&base.map));
        }

        #[test]
        fn gap_is_symmetric_and_scales(seed in 0u64..1000, s in 0.1f32..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mk = |n: usize| Tensor::from_vec(&[n, 5], (0..n * 5).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
            let (a, b) = (mk(7), mk(4));
            let g = modality_gap(&a, &b).unwrap();
            prop_assert!((g - modality_gap(&b, &a).unwrap()).abs() < 1e-12);
            let scaled = modality_gap(&a.map(|v| v * s), &b.map(|v| v * s)).unwrap();
            prop_assert!((scaled - s as f64 * g).abs() < 1e-5 * (1.0 + g));
        }
    }

    #[test]
    fn gap_of_identical_and_offset_sets() {
        let a = Tensor::from_vec(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(modality_gap(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v);
        let shifted = Tensor::from_vec(&[3, 2], b.data().chunks(2).flat_map(|r| [r[0] + 3.0, r[1] + 4.0]).collect()).unwrap();
        assert!((modality_gap(&a, &shifted).unwrap() - 5.0).abs() < 1e-9);
        assert!(modality_gap(&a, &Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn gap_features_pool_cells() {
        let (h, w) = (16, 32);
        let data: Vec<f32> = (0..h * w).map(|p| if (p % w) < w / 2 { 1.0 } else { -1.0 }).collect();
        let f = gap_features(&Tensor::from_vec(&[1, 1, h, w], data).unwrap()).unwrap();
        assert_eq!(f.shape(), &[1, 64]);
        for gy in 0..8 {
            for gx in 0..8 {
                assert_eq!(f.data()[gy * 8 + gx], if gx < 4 { 1.0 } else { -1.0 });
            }
        }
    }

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> ImageBatch {
        let mut data = Vec::new();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(c, y, x));
                }
            }
        }
        ImageBatch::new(Tensor::from_vec(&[1, 3, h, w], data).unwrap(), vec![Visible]).unwrap()
    }

    #[test]
    fn self_pairs_score_one_and_constants_score_zero() {
        let filter = FilterConfig::default();
        let x = img(16, 32, |_, y, x| ((y * 7 + x * 3) % 11) as f32 / 5.5 - 1.0);
        let c = condition(&x, &filter).unwrap().data;
        let s = identity_preservation(&x, &c, &filter).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-6);
        let flat = img(16, 32, |_, _, _| 0.2);
        assert_eq!(identity_preservation(&flat, &c, &filter).unwrap()[0], 0.0);
    }

    #[test]
    fn saturation_separates_gray_from_color() {
        let gray = img(4, 4, |_, y, _| y as f32 * 0.1);
        let color = img(4, 4, |c, y, _| if c == y % 3 { 1.0 } else { -1.0 });
        assert_eq!(channel_saturation(&gray.data)[0], 0.0);
        let scorer = ModalityScorer::calibrate(&color.data, &gray.data).unwrap();
        assert_eq!(scorer.classify(&gray.data), vec![Infrared]);
        assert_eq!(scorer.classify(&color.data), vec![Visible]);
        let single = Tensor::full(&[2, 1, 4, 4], 0.5);
        assert_eq!(scorer.classify(&single), vec![Infrared; 2]);
    }

    #[test]
    fn label_noise_flips_the_requested_fraction() {
        let labels: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let noisy = symmetric_label_noise(&labels, 5, 0.2, 3);
        let flipped = labels.iter().zip(&noisy).filter(|(a, b)| a != b).count();
        assert_eq!(flipped, 20);
        assert!(noisy.iter().all(|&l| l < 5));
    }

    #[test]
    fn projection_recovers_dominant_axis() {
        let data: Vec<f32> = (0..20).flat_map(|i| [i as f32, 0.01 * ((i * 7) % 3) as f32, 0.0]).collect();
        let p = project_2d(&Tensor::from_vec(&[20, 3], data).unwrap()).unwrap();
        let spread = |k: usize| p.iter().map(|v| v[k].abs()).fold(0.0, f64::max);
        assert!(spread(0) > 9.0);
        assert!(spread(1) < 0.1);
    }

    fn two_identity_set(n: usize, seed: u64) -> LabeledImages {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (8, 16);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            for _c in 0..3 {
                for r in 0..h {
                    for _x in 0..w {
                        let base = if (r < h / 2) == (y == 0) { 0.6 } else { -0.6 };
                        data.push(base + rng.random_range(-0.1..0.1));
                    }
                }
            }
            labels.push(y);
        }
        LabeledImages {
            images: Tensor::from_vec(&[n, 3, h, w], data).unwrap(),
            labels,
        }
    }

    #[test]
    fn separable_two_identity_set_is_learned_within_200_steps() {
        let real = two_identity_set(32, 1);
        let empty = LabeledImages {
            images: Tensor::zeros(&[0, 3, 8, 16]),
            labels: vec![],
        };
        let cfg = ReidConfig {
            steps: 200,
            ..ReidConfig::default()
        };
        let r = train_reid(&real, &empty, 2, &LossConfig::default(), &cfg).unwrap();
        assert_eq!(r.classifier.accuracy(&real.images, &real.labels), 1.0);
        assert_eq!(r.losses.len(), 200);
    }

    #[test]
    fn empty_generated_stream_matches_plain_cross_entropy() {
        let real = two_identity_set(16, 2);
        let empty = LabeledImages {
            images: Tensor::zeros(&[0, 3, 8, 16]),
            labels: vec![],
        };
        let cfg = ReidConfig {
            steps: 20,
            ..ReidConfig::default()
        };
        let runs: Vec<Vec<f64>> = crate::labels::LossMode::ALL
            .iter()
            .map(|&m| {
                train_reid(&real, &empty, 2, &LossConfig::default().with_mode(m), &cfg)
                    .unwrap()
                    .losses
            })
            .collect();
        for r in &runs[1..] {
            assert_eq!(r, &runs[0]);
        }
    }

    #[test]
    fn classifier_outputs_are_distributions() {
        let real = two_identity_set(6, 3);
        let clf = ToyClassifier::new(3, 5, &ReidConfig::default()).unwrap();
        let (emb, logits) = clf.infer(&real.images);
        assert_eq!(emb.shape(), &[6, 32]);
        for i in 0..6 {
            let p = crate::labels::softmax(&logits.item(i).iter().map(|&v| v as f64).collect::<Vec<_>>());
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_has_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::zeros(&[3, 3, 8, 16]);
        let b = Tensor::zeros(&[5, 1, 8, 16]);
        let path = dir.path().join("g.png");
        grid_png(&path, &[&a, &b], 4).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (16 * 2 + 2, 8 * 3 + 4));
    }
}
