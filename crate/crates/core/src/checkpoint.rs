//! Versioned checkpoint files made of named sections of shape-tagged f64
//! tensors, plus the config text and master seed of the run.
//!
//! Layout (all header lines end in `\n`):
//!
//! ```text
//! PPCK <version>
//! seed <u64>
//! config <n bytes>
//! <config text>\n
//! sections <count>
//! section <name> <tensor count>
//! tensor <rank> <dim>...
//! <8·numel little-endian f64 bytes>\n
//! ```

use std::path::Path;

use crate::backbone::{Backbone, BackboneConfig};
use crate::dapa::AlignmentHead;
use crate::datagen::{fields, num, Cursor};
use crate::detect::{DetectionHead, HeadConfig, HeadMetricsRow};
use crate::error::{Error, Result};
use crate::nn::{Mlp, Parameters, Projection};
use crate::numcore::Tensor;
use crate::optim::OptimState;
use crate::pretrain::{MetricsRow, PretrainConfig, PretrainState, SslHeads};
use crate::spem::{PcaModel, PromptBank};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<Tensor>,
}

impl Section {
    pub fn new(name: &str, tensors: Vec<Tensor>) -> Self {
        Self {
            name: name.to_string(),
            tensors,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub config: String,
    pub sections: Vec<Section>,
}

fn row(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::new(&[1, n], values).expect("row shape")
}

fn scalar_at(t: &Tensor, i: usize, what: &str) -> Result<f64> {
    t.data()
        .get(i)
        .copied()
        .ok_or_else(|| Error::State(format!("{what}: field {i} missing")))
}

impl Checkpoint {
    pub fn new(seed: u64, config: String) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            seed,
            config,
            sections: Vec::new(),
        }
    }

    /// Adds `s`, replacing any section of the same name in place.
    pub fn put(&mut self, s: Section) {
        match self.sections.iter_mut().find(|x| x.name == s.name) {
            Some(slot) => *slot = s,
            None => self.sections.push(s),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn section(&self, name: &str) -> Result<&[Tensor]> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.tensors.as_slice())
            .ok_or_else(|| Error::State(format!("checkpoint has no '{name}' section")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let text = |out: &mut Vec<u8>, s: String| out.extend_from_slice(s.as_bytes());
        text(&mut out, format!("PPCK {}\nseed {}\nconfig {}\n", self.version, self.seed, self.config.len()));
        out.extend_from_slice(self.config.as_bytes());
        out.push(b'\n');
        text(&mut out, format!("sections {}\n", self.sections.len()));
        for s in &self.sections {
            text(&mut out, format!("section {} {}\n", s.name, s.tensors.len()));
            for t in &s.tensors {
                let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
                text(&mut out, format!("tensor {} {}\n", t.shape().len(), dims.join(" ")));
                t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                out.push(b'\n');
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        let l = c.line()?;
        let f = fields(&c, l, "PPCK", 1)?;
        let version: u32 = num(&c, f[0], "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::State(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let l = c.line()?;
        let f = fields(&c, l, "seed", 1)?;
        let seed: u64 = num(&c, f[0], "seed")?;
        let l = c.line()?;
        let f = fields(&c, l, "config", 1)?;
        let n: usize = num(&c, f[0], "config length")?;
        let config = std::str::from_utf8(c.take(n)?)
            .map_err(|_| c.err("config text is not UTF-8"))?
            .to_string();
        if c.take(1)? != b"\n" {
            return Err(c.err("missing newline after config"));
        }
        let l = c.line()?;
        let f = fields(&c, l, "sections", 1)?;
        let count: usize = num(&c, f[0], "section count")?;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let l = c.line()?;
            let f = fields(&c, l, "section", 2)?;
            let name = f[0].to_string();
            let nt: usize = num(&c, f[1], "tensor count")?;
            let mut tensors = Vec::with_capacity(nt);
            for _ in 0..nt {
                let l = c.line()?;
                let parts: Vec<&str> = l.split_whitespace().collect();
                if parts.first() != Some(&"tensor") || parts.len() < 2 {
                    return Err(c.err(format!("expected a tensor header, found '{l}'")));
                }
                let rank: usize = num(&c, parts[1], "rank")?;
                if parts.len() != rank + 2 {
                    return Err(c.err(format!("tensor header '{l}' does not list {rank} dims")));
                }
                let shape: Vec<usize> = parts[2..].iter().map(|s| num(&c, s, "dim")).collect::<Result<_>>()?;
                let numel: usize = shape.iter().product();
                let raw = c.take(numel * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect();
                if c.take(1)? != b"\n" {
                    return Err(c.err("missing newline after tensor data"));
                }
                tensors.push(Tensor::new(&shape, data).map_err(|e| c.err(e.to_string()))?);
            }
            sections.push(Section { name, tensors });
        }
        if c.pos != bytes.len() {
            return Err(c.err("trailing bytes after last section"));
        }
        Ok(Self {
            version,
            seed,
            config,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn copy_into(slots: Vec<&mut Tensor>, tensors: &[Tensor], what: &str) -> Result<()> {
    if slots.len() != tensors.len() {
        return Err(Error::State(format!(
            "{what} section holds {} tensors, expected {}",
            tensors.len(),
            slots.len()
        )));
    }
    for (slot, t) in slots.into_iter().zip(tensors) {
        if slot.shape() != t.shape() {
            return Err(Error::dim("checkpoint section", slot.shape(), t.shape()));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

fn plain(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.data().to_vec()).expect("same shape")
}

fn plain_all(ts: Vec<&Tensor>) -> Vec<Tensor> {
    ts.into_iter().map(plain).collect()
}

pub fn backbone_section(b: &Backbone) -> Section {
    Section::new("backbone", plain_all(b.params()))
}

pub fn restore_backbone(cfg: BackboneConfig, ck: &Checkpoint) -> Result<Backbone> {
    Backbone::from_tensors(cfg, ck.section("backbone")?.to_vec())
}

fn projection_tensors(p: &Projection) -> Vec<Tensor> {
    plain_all(p.params())
}

fn projection_from(tensors: &[Tensor], what: &str) -> Result<Projection> {
    match tensors {
        [] => Ok(Projection::Identity),
        [w1, b1, w2, b2] => Ok(Projection::Mlp(Mlp {
            w1: w1.clone().into_param(),
            b1: b1.clone().into_param(),
            w2: w2.clone().into_param(),
            b2: b2.clone().into_param(),
        })),
        _ => Err(Error::State(format!("{what}: expected 0 or 4 tensors, found {}", tensors.len()))),
    }
}

/// Sections `pca`, `prompt_bank`, `ssl_heads`, `dapa_head`, `optimizer`
/// and `pretrain_progress`.
pub fn pretrain_sections(s: &PretrainState) -> Vec<Section> {
    let pca = match &s.bank.pca {
        Some(p) => vec![plain(&p.mean), plain(&p.components), row(p.explained_variance.clone())],
        None => Vec::new(),
    };
    let mut bank = vec![plain(&s.bank.centroids)];
    bank.extend(plain_all(s.bank.projector.params()));
    bank.push(row(vec![s.bank.temperature]));
    let mut ssl = Vec::new();
    ssl.extend(projection_tensors(&s.ssl.projector));
    ssl.extend(projection_tensors(&s.ssl.predictor));
    let mut opt = vec![row(vec![s.optim.step as f64])];
    opt.extend(s.optim.first.iter().map(|m| row(m.clone())));
    opt.extend(s.optim.second.iter().map(|m| row(m.clone())));
    let metrics: Vec<f64> = s
        .metrics
        .iter()
        .flat_map(|m| [m.epoch as f64, m.lr, m.loss_ssl, m.loss_prompt, m.loss_dapa, m.loss_total, m.mmd_eval])
        .collect();
    let mut progress = vec![row(vec![s.epochs_done as f64])];
    if !s.metrics.is_empty() {
        progress.push(Tensor::new(&[s.metrics.len(), 7], metrics).expect("metrics shape"));
    }
    vec![
        Section::new("pca", pca),
        Section::new("prompt_bank", bank),
        Section::new("ssl_heads", ssl),
        Section::new("dapa_head", projection_tensors(&s.dapa.projection)),
        Section::new("optimizer", opt),
        Section::new("pretrain_progress", progress),
    ]
}

pub fn restore_pretrain(ck: &Checkpoint, cfg: &PretrainConfig) -> Result<PretrainState> {
    let pca = match ck.section("pca")? {
        [] => None,
        [mean, components, var] => Some(PcaModel {
            mean: mean.clone(),
            components: components.clone(),
            explained_variance: var.data().to_vec(),
        }),
        other => return Err(Error::State(format!("pca section holds {} tensors", other.len()))),
    };
    let bank_t = ck.section("prompt_bank")?;
    let [centroids, w1, b1, w2, b2, tau] = bank_t else {
        return Err(Error::State(format!("prompt_bank section holds {} tensors, expected 6", bank_t.len())));
    };
    let projector = Mlp {
        w1: w1.clone().into_param(),
        b1: b1.clone().into_param(),
        w2: w2.clone().into_param(),
        b2: b2.clone().into_param(),
    };
    let bank = PromptBank::new(pca, centroids.clone(), projector, scalar_at(tau, 0, "temperature")?)?;

    let ssl_t = ck.section("ssl_heads")?;
    let split = match ssl_t.len() {
        0 => 0,
        8 => 4,
        n => return Err(Error::State(format!("ssl_heads section holds {n} tensors"))),
    };
    let ssl = SslHeads {
        projector: projection_from(&ssl_t[..split], "ssl projector")?,
        predictor: projection_from(&ssl_t[split..], "ssl predictor")?,
    };
    let mut dapa = AlignmentHead {
        projection: projection_from(ck.section("dapa_head")?, "dapa_head")?,
    };
    dapa.set_trainable(cfg.use_dapa);

    let mut state = PretrainState {
        bank,
        ssl,
        dapa,
        optim: OptimState::new(cfg.optim.clone(), &[]),
        epochs_done: 0,
        metrics: Vec::new(),
    };
    let n = state.params().len();
    let opt = ck.section("optimizer")?;
    if opt.len() != 1 + 2 * n {
        return Err(Error::State(format!(
            "optimizer section holds {} tensors for {n} parameters",
            opt.len()
        )));
    }
    state.optim = OptimState::new(cfg.optim.clone(), &state.params());
    state.optim.step = scalar_at(&opt[0], 0, "optimizer step")? as u64;
    for i in 0..n {
        let (m, v) = (&opt[1 + i], &opt[1 + n + i]);
        if m.numel() != state.optim.first[i].len() || v.numel() != state.optim.second[i].len() {
            return Err(Error::State(format!("optimizer moment {i} has the wrong length")));
        }
        state.optim.first[i] = m.data().to_vec();
        state.optim.second[i] = v.data().to_vec();
    }

    let progress = ck.section("pretrain_progress")?;
    let (done, metrics) = match progress {
        [d] => (d, None),
        [d, m] if m.shape().len() == 2 && m.cols() == 7 => (d, Some(m)),
        _ => return Err(Error::State("malformed pretrain_progress section".into())),
    };
    state.epochs_done = scalar_at(done, 0, "epochs done")? as usize;
    state.metrics = metrics
        .map_or(&[][..], |m| m.data())
        .chunks_exact(7)
        .map(|r| MetricsRow {
            epoch: r[0] as usize,
            lr: r[1],
            loss_ssl: r[2],
            loss_prompt: r[3],
            loss_dapa: r[4],
            loss_total: r[5],
            mmd_eval: r[6],
        })
        .collect();
    Ok(state)
}

/// Sections `det_head` and `head_progress`.
pub fn head_sections(head: &DetectionHead, metrics: &[HeadMetricsRow]) -> Vec<Section> {
    let c = &head.cfg;
    let mut t = vec![row(vec![
        c.grid as f64,
        c.in_dim as f64,
        c.mid1 as f64,
        c.mid2 as f64,
        c.num_classes as f64,
        c.bn_eps,
        c.bn_momentum,
    ])];
    t.extend(plain_all(head.params()));
    t.push(row(head.running_mean.clone()));
    t.push(row(head.running_var.clone()));
    let m: Vec<f64> = metrics
        .iter()
        .flat_map(|r| [r.epoch as f64, r.lr, r.loss_focal, r.loss_giou, r.loss_det])
        .collect();
    let progress = if metrics.is_empty() {
        Vec::new()
    } else {
        vec![Tensor::new(&[metrics.len(), 5], m).expect("metrics shape")]
    };
    vec![Section::new("det_head", t), Section::new("head_progress", progress)]
}

pub fn restore_head(ck: &Checkpoint) -> Result<(DetectionHead, Vec<HeadMetricsRow>)> {
    let t = ck.section("det_head")?;
    if t.len() != 10 {
        return Err(Error::State(format!("det_head section holds {} tensors, expected 10", t.len())));
    }
    let m = &t[0];
    let field = |i| scalar_at(m, i, "det_head config");
    let cfg = HeadConfig {
        grid: field(0)? as usize,
        in_dim: field(1)? as usize,
        mid1: field(2)? as usize,
        mid2: field(3)? as usize,
        num_classes: field(4)? as usize,
        bn_eps: field(5)?,
        bn_momentum: field(6)?,
    };
    let mut head = DetectionHead::new(cfg, 0)?;
    copy_into(head.params_mut(), &t[1..8], "det_head")?;
    if t[8].numel() != head.running_mean.len() || t[9].numel() != head.running_var.len() {
        return Err(Error::State("det_head running statistics have the wrong length".into()));
    }
    head.running_mean = t[8].data().to_vec();
    head.running_var = t[9].data().to_vec();
    let metrics = match ck.section("head_progress") {
        Ok([m]) if m.shape().len() == 2 && m.cols() == 5 => m
            .data()
            .chunks_exact(5)
            .map(|r| HeadMetricsRow {
                epoch: r[0] as usize,
                lr: r[1],
                loss_focal: r[2],
                loss_giou: r[3],
                loss_det: r[4],
            })
            .collect(),
        Ok([]) => Vec::new(),
        Ok(_) => return Err(Error::State("malformed head_progress section".into())),
        Err(_) => Vec::new(),
    };
    Ok((head, metrics))
}

#[cfg(test)]
mod tests;
