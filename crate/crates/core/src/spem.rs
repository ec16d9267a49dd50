//! Prototype discovery and prompt construction from unlabeled target
//! images.
//!
//! Patch embeddings of the whole target pool are reduced with PCA and
//! clustered with k-means++. The centroids pass through a small MLP to
//! become prompt tokens. Per-image prompt means are histogram-weighted
//! views of the single global bank: an image whose patches fall 3:1 into
//! clusters `a` and `b` gets `0.75·p_a + 0.25·p_b`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::image::Raster;
use crate::linalg::symmetric_eigen;
use crate::nn::{Mlp, Parameters};
use crate::numcore::{Graph, Tensor, Var};
use crate::rng::{indexed_seed, named_rng, rng_from, sub_seed};

#[derive(Clone, Debug, PartialEq)]
pub struct SpemConfig {
    pub num_prompts: usize,
    pub reduced_dim: usize,
    /// Projector hidden width; `None` means `D/4`.
    pub hidden_dim: Option<usize>,
    pub temperature: f64,
    /// Centroid refresh period in epochs, 0 disables.
    pub refresh_interval: usize,
    pub n_init: usize,
    pub max_iter: usize,
}

impl Default for SpemConfig {
    fn default() -> Self {
        Self {
            num_prompts: 10,
            reduced_dim: 16,
            hidden_dim: None,
            temperature: 0.1,
            refresh_interval: 0,
            n_init: 10,
            max_iter: 300,
        }
    }
}

impl SpemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_prompts == 0 {
            return Err(Error::Config("spem.k must be at least 1".into()));
        }
        if self.reduced_dim == 0 {
            return Err(Error::Config("spem.reduced_dim must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "spem.tau must be positive, got {}",
                self.temperature
            )));
        }
        if self.n_init == 0 || self.max_iter == 0 {
            return Err(Error::Config("k-means n_init and max_iter must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden_for(&self, embed_dim: usize) -> usize {
        self.hidden_dim.unwrap_or((embed_dim / 4).max(1))
    }
}

/// Principal axes of a point cloud, without whitening.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Tensor,
    /// `[d' × D]`, orthonormal rows in descending-variance order.
    pub components: Tensor,
    pub explained_variance: Vec<f64>,
}

pub fn fit_pca(x: &Tensor, reduced_dim: usize) -> Result<PcaModel> {
    let (m, d) = (x.rows(), x.cols());
    if m <= reduced_dim {
        return Err(Error::InsufficientData(format!(
            "PCA to {reduced_dim} dims needs more than {reduced_dim} samples, got {m}"
        )));
    }
    if reduced_dim > d {
        return Err(Error::Config(format!(
            "reduced dim {reduced_dim} exceeds embedding dim {d}"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in 0..m {
        mean.iter_mut().zip(x.row(r)).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut centered = x.clone();
    for r in 0..m {
        let c = d;
        centered.data_mut()[r * c..(r + 1) * c]
            .iter_mut()
            .zip(&mean)
            .for_each(|(v, mu)| *v -= mu);
    }
    let mut cov = centered.transpose()?.matmul(&centered)?;
    let denom = (m - 1) as f64;
    cov.data_mut().iter_mut().for_each(|v| *v /= denom);
    // exact symmetry for the eigensolver
    for i in 0..d {
        for j in 0..i {
            let a = 0.5 * (cov.at(i, j) + cov.at(j, i));
            cov.data_mut()[i * d + j] = a;
            cov.data_mut()[j * d + i] = a;
        }
    }
    let eig = symmetric_eigen(cov.data(), d)?;
    let components = Tensor::new(
        &[reduced_dim, d],
        eig.vectors[..reduced_dim].concat(),
    )?;
    Ok(PcaModel {
        mean: Tensor::new(&[1, d], mean)?,
        components,
        explained_variance: eig.values[..reduced_dim].iter().map(|v| v.max(0.0)).collect(),
    })
}

impl PcaModel {
    pub fn reduced_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.components.cols()
    }

    /// `[M × D] → [M × d']`.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("pca transform", x.shape(), self.mean.shape()));
        }
        let mut c = x.clone();
        let d = self.input_dim();
        for r in 0..x.rows() {
            c.data_mut()[r * d..(r + 1) * d]
                .iter_mut()
                .zip(self.mean.data())
                .for_each(|(v, mu)| *v -= mu);
        }
        c.matmul(&self.components.transpose()?)
    }

    /// `[M × d'] → [M × D]`.
    pub fn inverse_transform(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = z.matmul(&self.components)?;
        let d = self.input_dim();
        for r in 0..z.rows() {
            x.data_mut()[r * d..(r + 1) * d]
                .iter_mut()
                .zip(self.mean.data())
                .for_each(|(v, mu)| *v += mu);
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning run.
    pub history: Vec<f64>,
    /// Final inertia of every restart, in seed order.
    pub run_inertias: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    (0..centroids.rows())
        .map(|k| (k, sq_dist(point, centroids.row(k))))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Nearest-centroid ids for every row of `points`.
pub fn assign_nearest(points: &Tensor, centroids: &Tensor) -> Vec<usize> {
    (0..points.rows()).map(|r| nearest(points.row(r), centroids).0).collect()
}

fn kmeans_plus_plus(points: &Tensor, k: usize, rng: &mut crate::rng::Rng) -> Tensor {
    let m = points.rows();
    let d = points.cols();
    let mut chosen = Vec::with_capacity(k * d);
    let first = rng.random_range(0..m);
    chosen.extend_from_slice(points.row(first));
    let mut dist: Vec<f64> = (0..m).map(|r| sq_dist(points.row(r), points.row(first))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..m)
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut idx = m - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        };
        chosen.extend_from_slice(points.row(pick));
        let new = &chosen[c * d..(c + 1) * d];
        for r in 0..m {
            dist[r] = dist[r].min(sq_dist(points.row(r), new));
        }
    }
    Tensor::new(&[k, d], chosen).expect("k-means++ shape")
}

fn lloyd(points: &Tensor, mut centroids: Tensor, max_iter: usize) -> KMeansResult {
    let (m, d, k) = (points.rows(), points.cols(), centroids.rows());
    let mut assignments = vec![usize::MAX; m];
    let mut dists = vec![0.0; m];
    let mut history = Vec::new();
    for iter in 0..max_iter {
        let mut changed = false;
        for r in 0..m {
            let (id, dd) = nearest(points.row(r), &centroids);
            if assignments[r] != id {
                changed = true;
                assignments[r] = id;
            }
            dists[r] = dd;
        }
        history.push(dists.iter().sum());
        if !changed || iter + 1 == max_iter {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for r in 0..m {
            let a = assignments[r];
            counts[a] += 1;
            sums[a * d..(a + 1) * d]
                .iter_mut()
                .zip(points.row(r))
                .for_each(|(s, v)| *s += v);
        }
        let cdata = centroids.data_mut();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    cdata[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed at the point farthest from its centroid
                let far = (0..m)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("non-empty points");
                cdata[c * d..(c + 1) * d].copy_from_slice(points.row(far));
                dists[far] = 0.0;
            }
        }
    }
    let inertia = *history.last().unwrap_or(&0.0);
    KMeansResult {
        centroids,
        assignments,
        inertia,
        history,
        run_inertias: Vec::new(),
    }
}

/// Best-of-`n_init` k-means++ / Lloyd clustering.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, n_init: usize, max_iter: usize) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::Config("k-means needs k ≥ 1".into()));
    }
    if points.rows() < k {
        return Err(Error::InsufficientData(format!(
            "k-means with k={k} needs at least {k} points, got {}",
            points.rows()
        )));
    }
    let mut best: Option<KMeansResult> = None;
    let mut run_inertias = Vec::with_capacity(n_init);
    for run in 0..n_init {
        let mut rng = rng_from(indexed_seed(seed, "kmeans", run as u64));
        let init = kmeans_plus_plus(points, k, &mut rng);
        let res = lloyd(points, init, max_iter);
        run_inertias.push(res.inertia);
        // strict comparison keeps the lowest run index on ties
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    let mut best = best.expect("n_init ≥ 1");
    best.run_inertias = run_inertias;
    Ok(best)
}

/// Patch-level cluster ids and histograms for a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMap {
    pub ids: Vec<Vec<usize>>,
    pub histograms: Vec<Vec<usize>>,
}

impl AssignmentMap {
    pub fn from_ids(ids: Vec<Vec<usize>>, k: usize) -> Result<Self> {
        let mut histograms = Vec::with_capacity(ids.len());
        for (i, row) in ids.iter().enumerate() {
            let mut h = vec![0; k];
            for &id in row {
                if id >= k {
                    return Err(Error::Contract(format!(
                        "image {i} has cluster id {id} outside [0, {k})"
                    )));
                }
                h[id] += 1;
            }
            histograms.push(h);
        }
        Ok(Self { ids, histograms })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Histogram of image `i` normalized to sum 1.
    pub fn weights(&self, i: usize) -> Vec<f64> {
        let h = &self.histograms[i];
        let n: usize = h.iter().sum();
        h.iter().map(|&c| c as f64 / n.max(1) as f64).collect()
    }

    /// `[B × K]` weight matrix for the listed images.
    pub fn weight_matrix(&self, images: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = images.iter().map(|&i| self.weights(i)).collect();
        Tensor::from_rows(&rows)
    }
}

/// Centroids, projector and the cached prompt tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    /// `None` for banks built from random anchors rather than clustering.
    pub pca: Option<PcaModel>,
    pub centroids: Tensor,
    pub projector: Mlp,
    prompts: Tensor,
    pub temperature: f64,
}

impl PromptBank {
    pub fn new(pca: Option<PcaModel>, centroids: Tensor, projector: Mlp, temperature: f64) -> Result<Self> {
        if centroids.cols() != projector.input_dim() {
            return Err(Error::dim("prompt projector", centroids.shape(), projector.w1.shape()));
        }
        let prompts = projector.apply(&centroids)?;
        Ok(Self {
            pca,
            centroids,
            projector,
            prompts,
            temperature,
        })
    }

    /// Bank whose anchors are seeded Gaussian draws instead of prototypes.
    pub fn random_anchors(k: usize, reduced_dim: usize, hidden: usize, embed_dim: usize, temperature: f64, seed: u64) -> Result<Self> {
        let mut rng = named_rng(seed, "anchors");
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let c = Tensor::new(&[k, reduced_dim], (0..k * reduced_dim).map(|_| normal.sample(&mut rng)).collect())?;
        let projector = Mlp::new(reduced_dim, hidden, embed_dim, &mut named_rng(seed, "projector"));
        Self::new(None, c, projector, temperature)
    }

    pub fn num_prompts(&self) -> usize {
        self.centroids.rows()
    }

    /// `MLP_θp(𝒞)`, `[K × D]`.
    pub fn prompts(&self) -> &Tensor {
        &self.prompts
    }

    /// Recomputes the prompt cache after a projector update.
    pub fn refresh_cache(&mut self) -> Result<()> {
        self.prompts = self.projector.apply(&self.centroids)?;
        Ok(())
    }

    /// Builds `P = MLP(𝒞)` on a graph with the bound projector vars.
    pub fn prompts_graph(&self, g: &mut Graph, projector_vars: &[Var]) -> Result<Var> {
        let c = g.constant(&self.centroids);
        Mlp::forward(g, projector_vars, c)
    }

    /// Cluster ids of each patch of `image`.
    pub fn assign_image(&self, backbone: &Backbone, image: &Raster) -> Result<Vec<usize>> {
        let pca = self.pca.as_ref().ok_or_else(|| {
            Error::State("prompt bank has no PCA model; it was built from random anchors".into())
        })?;
        let z = pca.transform(&backbone.patch_embeddings(image)?)?;
        Ok(assign_nearest(&z, &self.centroids))
    }

    pub fn assign(&self, backbone: &Backbone, images: &[&Raster]) -> Result<AssignmentMap> {
        let ids = images
            .iter()
            .map(|im| self.assign_image(backbone, im))
            .collect::<Result<Vec<_>>>()?;
        AssignmentMap::from_ids(ids, self.num_prompts())
    }
}

/// `p̄ᵢ` for image `i`: histogram-weighted mean of the prompt rows.
pub fn per_image_prompt_mean(bank: &PromptBank, assignment: &AssignmentMap, image_index: usize) -> Result<Tensor> {
    if image_index >= assignment.len() {
        return Err(Error::Contract(format!(
            "image {image_index} outside assignment map of {}",
            assignment.len()
        )));
    }
    let w = Tensor::new(&[1, bank.num_prompts()], assignment.weights(image_index))?;
    w.matmul(bank.prompts())
}

/// Stacked patch embeddings `[Σ N × D]` of `images`, taken from the
/// frozen patch projection before position codes.
pub fn harvest_patch_embeddings(backbone: &Backbone, images: &[&Raster]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::InsufficientData("no target images to harvest".into()));
    }
    let d = backbone.config().embed_dim;
    let mut data = Vec::new();
    for im in images {
        data.extend(backbone.patch_embeddings(im)?.into_data());
    }
    let m = data.len() / d;
    Tensor::new(&[m, d], data)
}

/// Prototype discovery result plus the fitted reducer.
fn discover(backbone: &Backbone, images: &[&Raster], cfg: &SpemConfig, seed: u64) -> Result<(PcaModel, KMeansResult)> {
    let x = harvest_patch_embeddings(backbone, images)?;
    let pca = fit_pca(&x, cfg.reduced_dim)?;
    let z = pca.transform(&x)?;
    let km = kmeans(&z, cfg.num_prompts, sub_seed(seed, "kmeans"), cfg.n_init, cfg.max_iter)?;
    Ok((pca, km))
}

pub fn build_prompt_bank(target_images: &[&Raster], backbone: &Backbone, cfg: &SpemConfig, seed: u64) -> Result<PromptBank> {
    cfg.validate()?;
    let (pca, km) = discover(backbone, target_images, cfg, seed)?;
    let d = backbone.config().embed_dim;
    let projector = Mlp::new(cfg.reduced_dim, cfg.hidden_for(d), d, &mut named_rng(seed, "projector"));
    PromptBank::new(Some(pca), km.centroids, projector, cfg.temperature)
}

/// Re-clusters on the configured interval, keeping `θ_p`.
pub fn refresh_centroids(bank: &PromptBank, target_images: &[&Raster], backbone: &Backbone, epoch: usize, cfg: &SpemConfig, seed: u64) -> Result<PromptBank> {
    if cfg.refresh_interval == 0 || epoch == 0 || !epoch.is_multiple_of(cfg.refresh_interval) || bank.pca.is_none() {
        return Ok(bank.clone());
    }
    let (pca, km) = discover(backbone, target_images, cfg, seed)?;
    PromptBank::new(Some(pca), km.centroids, bank.projector.clone(), bank.temperature)
}

/// InfoNCE over cosine similarities between pooled features `h` and
/// prompt means `p̄`, both `[B × D]`, summed over the batch.
pub fn prompt_consistency_loss(g: &mut Graph, pooled: Var, prompt_means: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
    }
    let (hs, ps) = (g.shape(pooled).to_vec(), g.shape(prompt_means).to_vec());
    if hs.len() != 2 || hs != ps {
        return Err(Error::dim("prompt consistency", &hs, &ps));
    }
    let b = hs[0];
    let hn = g.normalize_rows(pooled)?;
    let pn = g.normalize_rows(prompt_means)?;
    let pt = g.transpose(pn)?;
    let s = g.matmul(hn, pt)?;
    let s = g.scale(s, 1.0 / temperature);
    let ls = g.log_softmax(s, 1)?;
    let eye = g.constant(&Tensor::eye(b));
    let diag = g.mul(ls, eye)?;
    let total = g.sum(diag);
    Ok(g.neg(total))
}

/// Value-only form of [`prompt_consistency_loss`].
pub fn prompt_consistency_value(pooled: &Tensor, prompt_means: &Tensor, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (h, p) = (g.constant(pooled), g.constant(prompt_means));
    let l = prompt_consistency_loss(&mut g, h, p, temperature)?;
    Ok(g.scalar(l))
}

/// Per-cluster `(size, fraction of members labelled true)`.
pub fn cluster_purity(assignments: &[usize], labels: &[bool], k: usize) -> Result<Vec<(usize, f64)>> {
    if assignments.len() != labels.len() {
        return Err(Error::dim("cluster purity", &[assignments.len()], &[labels.len()]));
    }
    let mut size = vec![0usize; k];
    let mut hits = vec![0usize; k];
    for (&a, &l) in assignments.iter().zip(labels) {
        if a >= k {
            return Err(Error::Contract(format!("cluster id {a} outside [0, {k})")));
        }
        size[a] += 1;
        hits[a] += usize::from(l);
    }
    Ok(size
        .iter()
        .zip(&hits)
        .map(|(&s, &h)| (s, if s == 0 { 0.0 } else { h as f64 / s as f64 }))
        .collect())
}

impl Parameters for PromptBank {
    fn params(&self) -> Vec<&Tensor> {
        self.projector.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.projector.params_mut()
    }
}

#[cfg(test)]
mod tests;
