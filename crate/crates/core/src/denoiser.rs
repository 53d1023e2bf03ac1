//! The noise-prediction network: a small U-shaped residual convolutional network.
//!
//! The condition image is concatenated to the noisy input along the channel axis.
//! A sinusoidal timestep embedding (passed through a two-layer MLP) and a learned
//! modality-indicator embedding are summed, and the sum is injected into every
//! residual block. The indicator table has three rows: visible, infrared and a
//! learned null row used by the unconditional guidance branch.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::batch::ModalityIndicator;
use crate::conditioning::FilterConfig;
use crate::error::{Error, Result};
use crate::nn::{group_count, Conv2d, GroupNorm, Linear};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::schedule::ScheduleConfig;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks: usize,
    /// Levels whose down/up blocks carry self-attention. The middle block (lowest
    /// resolution) always attends.
    pub attention_levels: BTreeSet<usize>,
    pub embedding_dim: usize,
    pub max_groups: usize,
    /// Filter producing the condition channel; `None` builds the indicator-only variant.
    /// Written as `false` in config files.
    #[serde(with = "toggle")]
    pub condition: Option<FilterConfig>,
    /// Adds `sqrt(1 - alpha_bar_t) * x_t` under this schedule to the network output,
    /// so the network only fits the residual; `None` (`false` in config files) disables it.
    #[serde(with = "toggle")]
    pub output_skip: Option<ScheduleConfig>,
}

/// Optional sections that serialize as `false` when absent, since TOML has no null.
/// `true` selects the section's defaults.
mod toggle {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr<T> {
        Flag(bool),
        Value(T),
    }

    pub fn serialize<T: Serialize, S: Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(inner) => inner.serialize(s),
            None => s.serialize_bool(false),
        }
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<Option<T>, D::Error>
    where
        T: Deserialize<'de> + Default,
        D: Deserializer<'de>,
    {
        Ok(match Repr::<T>::deserialize(d)? {
            Repr::Flag(false) => None,
            Repr::Flag(true) => Some(T::default()),
            Repr::Value(v) => Some(v),
        })
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            image_size: (32, 64),
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            num_res_blocks: 1,
            attention_levels: BTreeSet::new(),
            embedding_dim: 64,
            max_groups: 8,
            condition: Some(FilterConfig::default()),
            output_skip: None,
        }
    }
}

impl DenoiserConfig {
    pub fn in_channels(&self) -> usize {
        self.image_channels + usize::from(self.condition.is_some())
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn without_condition(mut self) -> Self {
        self.condition = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel multipliers must be non-empty and positive".into()));
        }
        let div = 1usize << (self.levels() - 1);
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} not divisible by {div} for {} levels",
                self.levels()
            )));
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(2) {
            return Err(Error::Config("base_channels must be even and positive".into()));
        }
        if self.num_res_blocks == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("num_res_blocks and embedding_dim must be positive".into()));
        }
        if !matches!(self.image_channels, 1 | 3) {
            return Err(Error::Config("image_channels must be 1 or 3".into()));
        }
        if let Some(level) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return Err(Error::Config(format!("attention level {level} does not exist")));
        }
        if let Some(f) = &self.condition {
            f.validate()?;
        }
        if let Some(s) = &self.output_skip {
            s.build()?;
        }
        Ok(())
    }

    /// Short stable digest used in checkpoint manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &DenoiserConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, group_count(cin, cfg.max_groups))?,
            conv1: Conv2d::same3(store, &format!("{name}.conv1"), cin, cout, rng)?,
            emb: Linear::new(store, &format!("{name}.emb"), cfg.embedding_dim, cout, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, group_count(cout, cfg.max_groups))?,
            conv2: Conv2d::zeroed3(store, &format!("{name}.conv2"), cout, cout)?,
            skip: if cin != cout {
                Some(Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)?)
            } else {
                None
            },
        })
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var, emb_act: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, h);
        let e = self.emb.forward(g, emb_act);
        let h = g.add_channel(h, e);
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let skip = match &self.skip {
            Some(conv) => conv.forward(g, x),
            None => x,
        };
        g.add(skip, h)
    }
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl AttnBlock {
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        ch: usize,
        cfg: &DenoiserConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let pw = |suffix: &str, rng: &mut ChaCha8Rng, store: &mut ParamStore<F>| {
            Conv2d::new(store, &format!("{name}.{suffix}"), ch, ch, 1, 1, 0, rng)
        };
        let q = pw("q", rng, store)?;
        let k = pw("k", rng, store)?;
        let v = pw("v", rng, store)?;
        let proj = Conv2d {
            weight: store.insert(format!("{name}.proj.weight"), Tensor::zeros(&[ch, ch, 1, 1]))?,
            bias: store.insert(format!("{name}.proj.bias"), Tensor::zeros(&[ch]))?,
            stride: 1,
            pad: 0,
        };
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), ch, group_count(ch, cfg.max_groups))?,
            q,
            k,
            v,
            proj,
        })
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let h = self.norm.forward(g, x);
        let q = self.q.forward(g, h);
        let k = self.k.forward(g, h);
        let v = self.v.forward(g, h);
        let a = g.attention(q, k, v);
        let a = self.proj.forward(g, a);
        g.add(x, a)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    res: ResBlock,
    attn: Option<AttnBlock>,
}

impl Stage {
    fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var, emb: Var) -> Var {
        let h = self.res.forward(g, x, emb);
        match &self.attn {
            Some(a) => a.forward(g, h),
            None => h,
        }
    }
}

#[derive(Debug, Clone)]
struct UNet {
    time1: Linear,
    time2: Linear,
    indicator: ParamId,
    conv_in: Conv2d,
    down: Vec<Vec<Stage>>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: AttnBlock,
    mid2: ResBlock,
    up: Vec<Vec<Stage>>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    fn build<F: Scalar>(cfg: &DenoiserConfig, store: &mut ParamStore<F>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let base = cfg.base_channels;
        let emb = cfg.embedding_dim;
        let time1 = Linear::new(store, "time.fc1", base, emb, rng)?;
        let time2 = Linear::new(store, "time.fc2", emb, emb, rng)?;
        let indicator = store.insert("indicator.table", fan_in_uniform(&[3, emb], 1, rng))?;
        let conv_in = Conv2d::same3(store, "conv_in", cfg.in_channels(), base, rng)?;

        let mut skip_channels = vec![base];
        let mut ch = base;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        for (level, &mult) in cfg.channel_multipliers.iter().enumerate() {
            let out = base * mult;
            let mut stages = Vec::new();
            for r in 0..cfg.num_res_blocks {
                let name = format!("down.{level}.{r}");
                let res = ResBlock::new(store, &format!("{name}.res"), ch, out, cfg, rng)?;
                let attn = if cfg.attention_levels.contains(&level) {
                    Some(AttnBlock::new(store, &format!("{name}.attn"), out, cfg, rng)?)
                } else {
                    None
                };
                stages.push(Stage { res, attn });
                ch = out;
                skip_channels.push(ch);
            }
            down.push(stages);
            if level + 1 < cfg.levels() {
                downsample.push(Conv2d::new(store, &format!("down.{level}.sample"), ch, ch, 3, 2, 1, rng)?);
                skip_channels.push(ch);
            }
        }

        let mid1 = ResBlock::new(store, "mid.res1", ch, ch, cfg, rng)?;
        let mid_attn = AttnBlock::new(store, "mid.attn", ch, cfg, rng)?;
        let mid2 = ResBlock::new(store, "mid.res2", ch, ch, cfg, rng)?;

        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for (level, &mult) in cfg.channel_multipliers.iter().enumerate().rev() {
            let out = base * mult;
            let mut stages = Vec::new();
            for r in 0..=cfg.num_res_blocks {
                let skip = skip_channels.pop().expect("skip inventory");
                let name = format!("up.{level}.{r}");
                let res = ResBlock::new(store, &format!("{name}.res"), ch + skip, out, cfg, rng)?;
                let attn = if cfg.attention_levels.contains(&level) {
                    Some(AttnBlock::new(store, &format!("{name}.attn"), out, cfg, rng)?)
                } else {
                    None
                };
                stages.push(Stage { res, attn });
                ch = out;
            }
            up.push(stages);
            if level > 0 {
                upsample.push(Conv2d::same3(store, &format!("up.{level}.sample"), ch, ch, rng)?);
            }
        }
        debug_assert!(skip_channels.is_empty());
        let norm_out = GroupNorm::new(store, "out.norm", ch, group_count(ch, cfg.max_groups))?;
        let conv_out = Conv2d::zeroed3(store, "out.conv", ch, cfg.image_channels)?;
        Ok(Self {
            time1,
            time2,
            indicator,
            conv_in,
            down,
            downsample,
            mid1,
            mid_attn,
            mid2,
            up,
            upsample,
            norm_out,
            conv_out,
        })
    }

    fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        x_t: Var,
        t: &[usize],
        cond: Option<Var>,
        e: &[ModalityIndicator],
        base: usize,
    ) -> Var {
        let temb = g.input(timestep_embedding(t, base));
        let temb = self.time1.forward(g, temb);
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, temb);
        let table = g.param(self.indicator);
        let rows: Vec<usize> = e.iter().map(|m| m.index()).collect();
        let iemb = g.gather(table, &rows);
        let emb = g.add(temb, iemb);
        let emb_act = g.silu(emb);

        let input = match cond {
            Some(c) => g.concat(x_t, c),
            None => x_t,
        };
        let mut h = self.conv_in.forward(g, input);
        let mut skips = vec![h];
        for (level, stages) in self.down.iter().enumerate() {
            for stage in stages {
                h = stage.forward(g, h, emb_act);
                skips.push(h);
            }
            if let Some(ds) = self.downsample.get(level) {
                h = ds.forward(g, h);
                skips.push(h);
            }
        }
        h = self.mid1.forward(g, h, emb_act);
        h = self.mid_attn.forward(g, h);
        h = self.mid2.forward(g, h, emb_act);
        for (i, stages) in self.up.iter().enumerate() {
            for stage in stages {
                let skip = skips.pop().expect("skip stack");
                let joined = g.concat(h, skip);
                h = stage.forward(g, joined, emb_act);
            }
            if let Some(us) = self.upsample.get(i) {
                let up = g.upsample2(h);
                h = us.forward(g, up);
            }
        }
        let h = self.norm_out.forward(g, h);
        let h = g.silu(h);
        self.conv_out.forward(g, h)
    }
}

/// Sinusoidal embedding `[sin(t f_0..f_{d/2}), cos(t f_0..f_{d/2})]`, `f_i = 10000^{-i/(d/2)}`.
pub fn timestep_embedding<F: Scalar>(t: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ti as f64 * f).collect();
        data.extend(args.iter().map(|a| F::of(a.sin())));
        data.extend(args.iter().map(|a| F::of(a.cos())));
    }
    Tensor::from_vec(&[t.len(), dim], data).expect("embedding shape")
}

/// Anything that predicts the noise in `x_t`.
///
/// Implemented by [`DenoiserParams`]; tests substitute closed-form stand-ins.
pub trait EpsModel<F: Scalar = f32> {
    fn predict_eps(
        &self,
        x_t: &Tensor<F>,
        t: &[usize],
        cond: Option<&Tensor<F>>,
        e: &[ModalityIndicator],
    ) -> Result<Tensor<F>>;

    /// Filter used to derive the condition channel, if the model takes one.
    fn condition_filter(&self) -> Option<FilterConfig>;
}

/// Network parameters plus the layer inventory they belong to.
#[derive(Debug, Clone)]
pub struct DenoiserParams<F: Scalar = f32> {
    config: DenoiserConfig,
    store: ParamStore<F>,
    net: UNet,
    /// `sqrt(1 - alpha_bar_t)` for `t = 1..=T` when the output skip is enabled.
    skip: Option<Vec<f64>>,
}

/// Samples per forward chunk when predicting outside of training.
const INFERENCE_CHUNK: usize = 16;

impl<F: Scalar> DenoiserParams<F> {
    /// Deterministic fan-in scaled initialization; the output layer starts at zero.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = UNet::build(config, &mut store, seed)?;
        let skip = match &config.output_skip {
            Some(s) => Some(s.build()?.alpha_bars().iter().map(|ab| (1.0 - ab).sqrt()).collect()),
            None => None,
        };
        Ok(Self {
            config: config.clone(),
            store,
            net,
            skip,
        })
    }

    /// Rebuilds the layer inventory for `config` and adopts `store` as its values.
    pub fn from_store(config: &DenoiserConfig, store: ParamStore<F>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        params.store.load_from(&store)?;
        Ok(params)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.numel()
    }

    pub fn indicator_table(&self) -> ParamId {
        self.net.indicator
    }

    pub fn cast<G: Scalar>(&self) -> DenoiserParams<G> {
        DenoiserParams {
            config: self.config.clone(),
            store: self.store.cast(),
            net: self.net.clone(),
            skip: self.skip.clone(),
        }
    }

    fn check_inputs(
        &self,
        x_shape: &[usize],
        t: &[usize],
        cond_shape: Option<&[usize]>,
        e: &[ModalityIndicator],
    ) -> Result<()> {
        let (h, w) = self.config.image_size;
        let want = [x_shape.first().copied().unwrap_or(0), self.config.image_channels, h, w];
        if x_shape != want {
            return Err(Error::Contract(format!("x_t shape {x_shape:?}, expected {want:?}")));
        }
        let n = x_shape[0];
        if t.len() != n || e.len() != n {
            return Err(Error::Contract(format!(
                "batch of {n} with {} timesteps and {} indicators",
                t.len(),
                e.len()
            )));
        }
        let max = self.skip.as_ref().map_or(usize::MAX, Vec::len);
        if let Some(&bad) = t.iter().find(|&&ti| ti == 0 || ti > max) {
            return Err(Error::TimestepRange { t: bad, max });
        }
        match (self.config.condition.is_some(), cond_shape) {
            (true, Some(cs)) if cs == [n, 1, h, w] => Ok(()),
            (true, Some(cs)) => Err(Error::Contract(format!(
                "condition shape {cs:?}, expected {:?}",
                [n, 1, h, w]
            ))),
            (true, None) => Err(Error::Contract("model requires a condition image".into())),
            (false, Some(_)) => Err(Error::Contract("model was built without a condition input".into())),
            (false, None) => Ok(()),
        }
    }

    /// Records the forward pass on `g`; used by training and gradient checks.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        x_t: Var,
        t: &[usize],
        cond: Option<Var>,
        e: &[ModalityIndicator],
    ) -> Result<Var> {
        let cs = cond.map(|c| g.value(c).shape().to_vec());
        self.check_inputs(g.value(x_t).shape(), t, cs.as_deref(), e)?;
        let out = self.net.forward(g, x_t, t, cond, e, self.config.base_channels);
        Ok(self.add_skip(g, x_t, out, t))
    }

    fn add_skip(&self, g: &mut Graph<F>, x_t: Var, out: Var, t: &[usize]) -> Var {
        match &self.skip {
            Some(table) => {
                let factors = t.iter().map(|&ti| F::of(table[ti - 1])).collect();
                let s = g.scale_items(x_t, factors);
                g.add(out, s)
            }
            None => out,
        }
    }

    /// Forward-only prediction; large batches are evaluated in chunks.
    pub fn predict(
        &self,
        x_t: &Tensor<F>,
        t: &[usize],
        cond: Option<&Tensor<F>>,
        e: &[ModalityIndicator],
    ) -> Result<Tensor<F>> {
        self.check_inputs(x_t.shape(), t, cond.map(|c| c.shape()), e)?;
        let n = x_t.dim(0);
        let mut parts = Vec::new();
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(n)).collect();
            let mut g = Graph::inference(&self.store);
            let x = g.input(x_t.select(&idx));
            let c = cond.map(|c| g.input(c.select(&idx)));
            let ts: Vec<usize> = idx.iter().map(|&i| t[i]).collect();
            let es: Vec<ModalityIndicator> = idx.iter().map(|&i| e[i]).collect();
            let out = self.net.forward(&mut g, x, &ts, c, &es, self.config.base_channels);
            let out = self.add_skip(&mut g, x, out, &ts);
            parts.push(g.value(out).clone());
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(x_t.shape()));
        }
        let refs: Vec<&Tensor<F>> = parts.iter().collect();
        Tensor::stack(&refs)
    }
}

impl<F: Scalar> EpsModel<F> for DenoiserParams<F> {
    fn predict_eps(
        &self,
        x_t: &Tensor<F>,
        t: &[usize],
        cond: Option<&Tensor<F>>,
        e: &[ModalityIndicator],
    ) -> Result<Tensor<F>> {
        self.predict(x_t, t, cond, e)
    }

    fn condition_filter(&self) -> Option<FilterConfig> {
        self.config.condition
    }
}
