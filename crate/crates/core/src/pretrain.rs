//! Self-supervised prompt pretraining on a frozen backbone.
//!
//! Each step pairs a source and a target mini-batch, draws two augmented
//! views of every image and runs them through the backbone with the current
//! prompts. The objective is
//! `L_ssl + λ₁·L_prompt + λ₂·L_dapa`: a symmetric SimSiam loss over both
//! batches, the prompt InfoNCE over target view one, and the mean-embedding
//! alignment between view-one pooled features of the two domains.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::backbone::Backbone;
use crate::dapa::{dapa_loss, linear_mmd, AlignmentHead};
use crate::error::{Error, Result};
use crate::image::Raster;
use crate::nn::{Mlp, Parameters, Projection};
use crate::numcore::{Graph, Tensor, Var};
use crate::optim::{adamw_step, lr_at, OptimConfig, OptimState};
use crate::rng::{indexed_seed, named_rng, rng_from, sub_seed};
use crate::spem::{build_prompt_bank, prompt_consistency_loss, refresh_centroids, AssignmentMap, PromptBank, SpemConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Area fraction range of the random crop.
    pub crop_scale: (f64, f64),
    pub aspect: (f64, f64),
    pub flip: bool,
    /// Additive brightness shift is drawn from `±brightness`.
    pub brightness: f64,
    /// Contrast factor is drawn from `1 ± contrast`.
    pub contrast: f64,
    /// Noise standard deviation is drawn from `[0, noise_sigma]`.
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.6, 1.0),
            aspect: (0.75, 4.0 / 3.0),
            flip: true,
            brightness: 0.25,
            contrast: 0.4,
            noise_sigma: 0.06,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            aspect: (1.0, 1.0),
            flip: false,
            brightness: 0.0,
            contrast: 0.0,
            noise_sigma: 0.0,
        }
    }
}

fn uniform(rng: &mut crate::rng::Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

fn augment_one(image: &Raster, cfg: &AugmentConfig, rng: &mut crate::rng::Rng) -> Raster {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let area = uniform(rng, cfg.crop_scale) * w * h;
    let ratio = uniform(rng, cfg.aspect);
    let cw = (area * ratio).sqrt().min(w);
    let ch = (area / ratio).sqrt().min(h);
    let x0 = uniform(rng, (0.0, w - cw));
    let y0 = uniform(rng, (0.0, h - ch));
    let mut out = if cw == w && ch == h {
        image.clone()
    } else {
        image.resample_window(x0, y0, cw, ch, image.width(), image.height())
    };
    if cfg.flip && rng.random_bool(0.5) {
        out = out.flip_horizontal();
    }
    let b = uniform(rng, (-cfg.brightness, cfg.brightness));
    let c = uniform(rng, (1.0 - cfg.contrast, 1.0 + cfg.contrast));
    let sigma = uniform(rng, (0.0, cfg.noise_sigma));
    if b != 0.0 || c != 1.0 || sigma > 0.0 {
        let mean = out.mean();
        let noise = Normal::new(0.0, sigma.max(1e-300)).expect("noise sigma");
        for v in out.data_mut() {
            let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            *v = (mean + (*v - mean) * c + b + n).clamp(0.0, 1.0);
        }
    }
    out
}

/// Two stochastic views of `image`, fixed by `seed`.
pub fn augment_pair(image: &Raster, seed: u64, cfg: &AugmentConfig) -> (Raster, Raster) {
    let mut rng = rng_from(seed);
    let a = augment_one(image, cfg, &mut rng);
    let b = augment_one(image, cfg, &mut rng);
    (a, b)
}

/// Projector `g` and predictor `h` of the SimSiam objective.
#[derive(Clone, Debug, PartialEq)]
pub struct SslHeads {
    pub projector: Projection,
    pub predictor: Projection,
}

impl SslHeads {
    /// `g: D → D → D`, `h: D → D/2 → D`.
    pub fn new(embed_dim: usize, seed: u64) -> Self {
        let mut rng = named_rng(seed, "ssl_heads");
        let d = embed_dim;
        Self {
            projector: Projection::Mlp(Mlp::new(d, d, d, &mut rng)),
            predictor: Projection::Mlp(Mlp::new(d, (d / 2).max(1), d, &mut rng)),
        }
    }

    pub fn identity() -> Self {
        Self {
            projector: Projection::Identity,
            predictor: Projection::Identity,
        }
    }

    fn split(&self, vars: &[Var]) -> (usize, usize) {
        let np = self.projector.params().len();
        debug_assert_eq!(vars.len(), np + self.predictor.params().len());
        (np, vars.len())
    }
}

impl Parameters for SslHeads {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.projector.params();
        v.extend(self.predictor.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.projector.params_mut();
        v.extend(self.predictor.params_mut());
        v
    }
}

/// `−mean_i cos(pᵢ, stop_gradient(zᵢ))` over matching rows.
pub fn negative_cosine(g: &mut Graph, p: Var, z: Var) -> Result<Var> {
    let z = g.stop_gradient(z);
    let pn = g.normalize_rows(p)?;
    let zn = g.normalize_rows(z)?;
    let prod = g.mul(pn, zn)?;
    let rows = g.shape(p)[0] as f64;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / rows))
}

/// Symmetric SimSiam loss over `[B × D]` pooled views.
pub fn simsiam_loss(g: &mut Graph, view1: Var, view2: Var, heads: &SslHeads, vars: &[Var]) -> Result<Var> {
    if g.shape(view1) != g.shape(view2) {
        return Err(Error::dim("simsiam", g.shape(view1), g.shape(view2)));
    }
    let (np, _) = heads.split(vars);
    let (pv, hv) = vars.split_at(np);
    let z1 = heads.projector.forward(g, pv, view1)?;
    let z2 = heads.projector.forward(g, pv, view2)?;
    let p1 = heads.predictor.forward(g, hv, z1)?;
    let p2 = heads.predictor.forward(g, hv, z2)?;
    let a = negative_cosine(g, p1, z2)?;
    let b = negative_cosine(g, p2, z1)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub prompt: f64,
    pub dapa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { prompt: 1.0, dapa: 0.5 }
    }
}

pub fn total_loss(l_ssl: f64, l_prompt: f64, l_dapa: f64, w: LossWeights) -> f64 {
    l_ssl + w.prompt * l_prompt + w.dapa * l_dapa
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub spem: SpemConfig,
    /// Prototype prompts and the prompt loss. When off, prompts come from
    /// random anchors and `λ₁` is treated as 0.
    pub use_spem: bool,
    /// Alignment loss; when off `λ₂` is treated as 0.
    pub use_dapa: bool,
    /// Output width of `f_p`; `None` means `D/2`.
    pub align_dim: Option<usize>,
    /// Images per domain in the fixed held-out MMD check.
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            optim: OptimConfig {
                base_lr: 1e-3,
                warmup_epochs: 3,
                total_epochs: 30,
                ..OptimConfig::default()
            },
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            spem: SpemConfig::default(),
            use_spem: true,
            use_dapa: true,
            align_dim: None,
            eval_size: 16,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            prompt: if self.use_spem { self.weights.prompt } else { 0.0 },
            dapa: if self.use_dapa { self.weights.dapa } else { 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_size == 0 {
            return Err(Error::Config("epochs, batch size and eval size must be positive".into()));
        }
        if self.optim.total_epochs != self.epochs {
            return Err(Error::Config(format!(
                "optimizer schedule spans {} epochs but the run has {}",
                self.optim.total_epochs, self.epochs
            )));
        }
        if self.weights.prompt < 0.0 || self.weights.dapa < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.optim.validate()?;
        self.spem.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_ssl: f64,
    pub loss_prompt: f64,
    pub loss_dapa: f64,
    pub loss_total: f64,
    pub mmd_eval: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,loss_ssl,loss_prompt,loss_dapa,loss_total,mmd_eval";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.loss_ssl, self.loss_prompt, self.loss_dapa, self.loss_total, self.mmd_eval
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Everything pretraining learns, plus where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState {
    pub bank: PromptBank,
    pub ssl: SslHeads,
    pub dapa: AlignmentHead,
    pub optim: OptimState,
    pub epochs_done: usize,
    pub metrics: Vec<MetricsRow>,
}

impl PretrainState {
    pub fn init(backbone: &Backbone, target: &[&Raster], cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let d = backbone.config().embed_dim;
        let spem_seed = sub_seed(cfg.seed, "spem");
        let bank = if cfg.use_spem {
            build_prompt_bank(target, backbone, &cfg.spem, spem_seed)?
        } else {
            PromptBank::random_anchors(
                cfg.spem.num_prompts,
                cfg.spem.reduced_dim,
                cfg.spem.hidden_for(d),
                d,
                cfg.spem.temperature,
                spem_seed,
            )?
        };
        let ssl = SslHeads::new(d, sub_seed(cfg.seed, "init"));
        let mut dapa = AlignmentHead::new(d, cfg.align_dim.unwrap_or((d / 2).max(1)), &mut named_rng(cfg.seed, "dapa"));
        dapa.set_trainable(cfg.use_dapa);
        let mut state = Self {
            optim: OptimState::new(cfg.optim.clone(), &[]),
            bank,
            ssl,
            dapa,
            epochs_done: 0,
            metrics: Vec::new(),
        };
        state.optim = OptimState::new(cfg.optim.clone(), &state.params());
        Ok(state)
    }

    /// Trainable tensors in optimizer order: `θ_p`, `g`, `h`, `f_p`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = self.bank.params();
        v.extend(self.ssl.params());
        v.extend(self.dapa.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.bank.params_mut();
        v.extend(self.ssl.params_mut());
        v.extend(self.dapa.params_mut());
        v
    }

    pub fn prompts(&self) -> &Tensor {
        self.bank.prompts()
    }
}

/// Pooled prompt-enhanced features `[n × D]` of `images`, no gradient.
pub fn pooled_features(backbone: &Backbone, prompts: Option<&Tensor>, images: &[&Raster]) -> Result<Tensor> {
    let d = backbone.config().embed_dim;
    let mut data = Vec::with_capacity(images.len() * d);
    for im in images {
        data.extend_from_slice(backbone.forward(im, prompts)?.1.data());
    }
    Tensor::new(&[images.len(), d], data)
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub ssl: f64,
    pub prompt: f64,
    pub dapa: f64,
    pub total: f64,
}

/// Graph handles for one step.
struct StepGraph {
    g: Graph,
    vars: Vec<Var>,
    ssl: Var,
    prompt: Option<Var>,
    dapa: Option<Var>,
    total: Var,
    losses: StepLosses,
}

/// A single term of the composite pretraining loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Ssl,
    Prompt,
    Dapa,
    Total,
}

fn build_step(backbone: &Backbone, state: &PretrainState, cfg: &PretrainConfig, src: &[&Raster], tgt: &[&Raster], aug_seed: impl Fn(usize) -> u64) -> Result<StepGraph> {
    let w = cfg.effective_weights();
    let mut g = Graph::new();
    let bvars = backbone.bind_frozen(&mut g);
    let pvars = Parameters::bind(&state.bank, &mut g);
    let svars = Parameters::bind(&state.ssl, &mut g);
    let dvars = Parameters::bind(&state.dapa, &mut g);
    let prompts = state.bank.prompts_graph(&mut g, &pvars)?;

    let images: Vec<&Raster> = src.iter().chain(tgt).copied().collect();
    let mut v1 = Vec::with_capacity(images.len());
    let mut v2 = Vec::with_capacity(images.len());
    let mut tgt_views = Vec::with_capacity(tgt.len());
    for (i, im) in images.iter().enumerate() {
        let (a, b) = augment_pair(im, aug_seed(i), &cfg.augment);
        v1.push(backbone.forward_graph(&mut g, &bvars, &a, Some(prompts))?.pooled);
        v2.push(backbone.forward_graph(&mut g, &bvars, &b, Some(prompts))?.pooled);
        if i >= src.len() {
            tgt_views.push(a);
        }
    }
    let z1 = g.concat_rows(&v1)?;
    let z2 = g.concat_rows(&v2)?;
    let l_ssl = simsiam_loss(&mut g, z1, z2, &state.ssl, &svars)?;
    let mut total = l_ssl;
    let (mut prompt_var, mut dapa_var) = (None, None);
    let mut losses = StepLosses {
        ssl: g.scalar(l_ssl),
        ..StepLosses::default()
    };

    let ns = src.len();
    let h_src = g.slice_rows(z1, 0, ns)?;
    let h_tgt = g.slice_rows(z1, ns, ns + tgt.len())?;
    if w.prompt > 0.0 {
        let refs: Vec<&Raster> = tgt_views.iter().collect();
        let map: AssignmentMap = state.bank.assign(backbone, &refs)?;
        let weights = map.weight_matrix(&(0..tgt.len()).collect::<Vec<_>>())?;
        let wv = g.constant(&weights);
        let pbar = g.matmul(wv, prompts)?;
        let lp = prompt_consistency_loss(&mut g, h_tgt, pbar, state.bank.temperature)?;
        losses.prompt = g.scalar(lp);
        prompt_var = Some(lp);
        let s = g.scale(lp, w.prompt);
        total = g.add(total, s)?;
    }
    if w.dapa > 0.0 {
        let ld = dapa_loss(&mut g, h_src, h_tgt, &state.dapa, &dvars)?;
        losses.dapa = g.scalar(ld);
        dapa_var = Some(ld);
        let s = g.scale(ld, w.dapa);
        total = g.add(total, s)?;
    }
    losses.total = g.scalar(total);
    let mut vars = pvars;
    vars.extend(svars);
    vars.extend(dvars);
    Ok(StepGraph {
        g,
        vars,
        ssl: l_ssl,
        prompt: prompt_var,
        dapa: dapa_var,
        total,
        losses,
    })
}

/// Loss values of one batch without touching any parameter.
pub fn evaluate_step(backbone: &Backbone, state: &PretrainState, cfg: &PretrainConfig, src: &[&Raster], tgt: &[&Raster], seed: u64) -> Result<StepLosses> {
    Ok(build_step(backbone, state, cfg, src, tgt, |i| indexed_seed(seed, "eval_augment", i as u64))?.losses)
}

/// Value of one loss term on a batch and its gradient for every tensor of
/// [`PretrainState::params`], in that order. Tensors the term does not
/// reach get zeros. Augmentation is seeded as in [`evaluate_step`].
pub fn term_gradients(
    backbone: &Backbone,
    state: &PretrainState,
    cfg: &PretrainConfig,
    src: &[&Raster],
    tgt: &[&Raster],
    seed: u64,
    term: LossTerm,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let sg = build_step(backbone, state, cfg, src, tgt, |i| indexed_seed(seed, "eval_augment", i as u64))?;
    let (var, value) = match term {
        LossTerm::Ssl => (Some(sg.ssl), sg.losses.ssl),
        LossTerm::Prompt => (sg.prompt, sg.losses.prompt),
        LossTerm::Dapa => (sg.dapa, sg.losses.dapa),
        LossTerm::Total => (Some(sg.total), sg.losses.total),
    };
    let var = var.ok_or_else(|| Error::Config(format!("{term:?} term is switched off in this config")))?;
    let grads = sg.g.backward(var)?;
    let out = state
        .params()
        .iter()
        .zip(&sg.vars)
        .map(|(t, &v)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], |d| d.to_vec()))
        .collect();
    Ok((value, out))
}

/// Projector outputs `z` and predictor outputs `p` of both views, as
/// built inside the training step.
fn ssl_branches(backbone: &Backbone, state: &PretrainState, cfg: &PretrainConfig, images: &[&Raster], seed: u64) -> Result<(Graph, [Var; 4])> {
    let mut g = Graph::new();
    let bvars = backbone.bind_frozen(&mut g);
    let pvars = Parameters::bind(&state.bank, &mut g);
    let svars = Parameters::bind(&state.ssl, &mut g);
    let prompts = state.bank.prompts_graph(&mut g, &pvars)?;
    let mut v1 = Vec::with_capacity(images.len());
    let mut v2 = Vec::with_capacity(images.len());
    for (i, im) in images.iter().enumerate() {
        let (a, b) = augment_pair(im, indexed_seed(seed, "eval_augment", i as u64), &cfg.augment);
        v1.push(backbone.forward_graph(&mut g, &bvars, &a, Some(prompts))?.pooled);
        v2.push(backbone.forward_graph(&mut g, &bvars, &b, Some(prompts))?.pooled);
    }
    let (h1, h2) = (g.concat_rows(&v1)?, g.concat_rows(&v2)?);
    let (np, _) = state.ssl.split(&svars);
    let (pv, hv) = svars.split_at(np);
    let z1 = state.ssl.projector.forward(&mut g, pv, h1)?;
    let z2 = state.ssl.projector.forward(&mut g, pv, h2)?;
    let p1 = state.ssl.predictor.forward(&mut g, hv, z1)?;
    let p2 = state.ssl.predictor.forward(&mut g, hv, z2)?;
    Ok((g, [z1, z2, p1, p2]))
}

/// `L_ssl` of `state` with the stop-gradient targets computed from
/// `targets` instead. At `targets == state` its gradient in `state` is the
/// one [`term_gradients`] reports for [`LossTerm::Ssl`].
pub fn ssl_with_fixed_targets(
    backbone: &Backbone,
    state: &PretrainState,
    targets: &PretrainState,
    cfg: &PretrainConfig,
    src: &[&Raster],
    tgt: &[&Raster],
    seed: u64,
) -> Result<f64> {
    let images: Vec<&Raster> = src.iter().chain(tgt).copied().collect();
    let (tg, [tz1, tz2, ..]) = ssl_branches(backbone, targets, cfg, &images, seed)?;
    let (mut g, [_, _, p1, p2]) = ssl_branches(backbone, state, cfg, &images, seed)?;
    let shape = g.shape(p1).to_vec();
    let z1 = g.constant(&Tensor::new(&shape, tg.value(tz1).to_vec())?);
    let z2 = g.constant(&Tensor::new(&shape, tg.value(tz2).to_vec())?);
    let a = negative_cosine(&mut g, p1, z2)?;
    let b = negative_cosine(&mut g, p2, z1)?;
    Ok(0.5 * (g.scalar(a) + g.scalar(b)))
}

/// One optimisation step; returns the pre-update losses.
pub fn train_step(backbone: &Backbone, state: &mut PretrainState, cfg: &PretrainConfig, src: &[&Raster], tgt: &[&Raster], lr: f64, aug_seed: impl Fn(usize) -> u64) -> Result<StepLosses> {
    let sg = build_step(backbone, state, cfg, src, tgt, aug_seed)?;
    let grads = sg.g.backward(sg.total)?;
    let PretrainState { bank, ssl, dapa, optim, .. } = state;
    let mut params = bank.params_mut();
    params.extend(ssl.params_mut());
    params.extend(dapa.params_mut());
    for (t, &v) in params.iter_mut().zip(&sg.vars) {
        t.zero_grad();
        grads.accumulate_into(v, t);
    }
    adamw_step(params, optim, lr)?;
    bank.refresh_cache()?;
    Ok(sg.losses)
}

fn held_out_mmd(backbone: &Backbone, state: &PretrainState, src: &[&Raster], tgt: &[&Raster], n: usize) -> Result<f64> {
    let a = pooled_features(backbone, Some(state.prompts()), &src[..n.min(src.len())])?;
    let b = pooled_features(backbone, Some(state.prompts()), &tgt[..n.min(tgt.len())])?;
    linear_mmd(&a, &b)
}

/// Runs (or resumes) pretraining until `cfg.epochs` or `stop_after` total
/// epochs are done. `on_epoch` sees the state after every epoch.
pub fn pretrain_loop(
    backbone: &Backbone,
    source: &[&Raster],
    target: &[&Raster],
    cfg: &PretrainConfig,
    resume: Option<PretrainState>,
    stop_after: Option<usize>,
    on_epoch: &mut dyn FnMut(&PretrainState) -> Result<()>,
) -> Result<PretrainState> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::InsufficientData("pretraining needs images from both domains".into()));
    }
    let mut state = match resume {
        Some(s) => {
            if s.optim.config != cfg.optim {
                return Err(Error::State("checkpoint optimizer settings differ from the config".into()));
            }
            s
        }
        None => PretrainState::init(backbone, target, cfg)?,
    };
    let b = cfg.batch_size.min(source.len()).min(target.len());
    let steps = source.len().min(target.len()) / b;

    if state.epochs_done == 0 && state.metrics.is_empty() {
        let l = evaluate_step(backbone, &state, cfg, &source[..b], &target[..b], cfg.seed)?;
        state.metrics.push(MetricsRow {
            epoch: 0,
            lr: 0.0,
            loss_ssl: l.ssl,
            loss_prompt: l.prompt,
            loss_dapa: l.dapa,
            loss_total: l.total,
            mmd_eval: held_out_mmd(backbone, &state, source, target, cfg.eval_size)?,
        });
    }

    let end = stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    while state.epochs_done < end {
        let epoch = state.epochs_done;
        let lr = lr_at(epoch, &cfg.optim)?;
        let mut rng = rng_from(indexed_seed(cfg.seed, "shuffle", epoch as u64));
        let mut so: Vec<usize> = (0..source.len()).collect();
        let mut to: Vec<usize> = (0..target.len()).collect();
        so.shuffle(&mut rng);
        to.shuffle(&mut rng);
        let mut acc = StepLosses::default();
        for s in 0..steps {
            let sb: Vec<&Raster> = so[s * b..(s + 1) * b].iter().map(|&i| source[i]).collect();
            let tb: Vec<&Raster> = to[s * b..(s + 1) * b].iter().map(|&i| target[i]).collect();
            let base = ((epoch as u64) << 32) | ((s * 2 * b) as u64);
            let l = train_step(backbone, &mut state, cfg, &sb, &tb, lr, |i| {
                indexed_seed(cfg.seed, "augment", base + i as u64)
            })?;
            acc.ssl += l.ssl;
            acc.prompt += l.prompt;
            acc.dapa += l.dapa;
            acc.total += l.total;
        }
        state.epochs_done += 1;
        state.bank = refresh_centroids(&state.bank, target, backbone, state.epochs_done, &cfg.spem, sub_seed(cfg.seed, "spem"))?;
        let n = steps as f64;
        state.metrics.push(MetricsRow {
            epoch: state.epochs_done,
            lr,
            loss_ssl: acc.ssl / n,
            loss_prompt: acc.prompt / n,
            loss_dapa: acc.dapa / n,
            loss_total: acc.total / n,
            mmd_eval: held_out_mmd(backbone, &state, source, target, cfg.eval_size)?,
        });
        on_epoch(&state)?;
    }
    Ok(state)
}
