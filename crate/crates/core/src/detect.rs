//! Single-scale detection head on the frozen token grid.
//!
//! Each of the `G×G` cells predicts `C` class logits and four box
//! parameters. A box is encoded relative to the cell holding its centre:
//! `(Δx, Δy)` is the centre offset inside the cell in `[0, 1)` and
//! `(Δw, Δh)` are `ln w`, `ln h` of the normalized size. The network emits
//! `σ⁻¹(Δx)`, `σ⁻¹(Δy)`, `Δw`, `Δh`.

use crate::backbone::{Backbone, BackboneConfig};
use crate::boxes::{giou, BBox};
use crate::datagen::LabeledScene;
use crate::error::{Error, Result};
use crate::image::Raster;
use crate::nn::{truncated_normal, Parameters};
use crate::numcore::{Graph, Tensor, Var};
use crate::optim::{adamw_step, lr_at, OptimConfig, OptimState};
use crate::rng::{indexed_seed, named_rng, rng_from};
use rand::seq::SliceRandom;

const PRIOR: f64 = 0.01;
/// Range the raw log-size outputs are clamped to before `exp`.
const LOG_SIZE_RANGE: (f64, f64) = (-8.0, 1.0);

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub grid: usize,
    pub in_dim: usize,
    pub mid1: usize,
    pub mid2: usize,
    pub num_classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl HeadConfig {
    /// Widths `D/2` and `D/4` on the backbone's grid.
    pub fn for_backbone(cfg: &BackboneConfig, num_classes: usize) -> Self {
        let d = cfg.embed_dim;
        Self {
            grid: cfg.grid(),
            in_dim: d,
            mid1: (d / 2).max(1),
            mid2: (d / 4).max(1),
            num_classes,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// 14×14×768 input, 384 and 128 wide blocks.
    pub fn full(num_classes: usize) -> Self {
        Self {
            mid2: 128,
            ..Self::for_backbone(&BackboneConfig::full(), num_classes)
        }
    }

    pub fn outputs(&self) -> usize {
        self.num_classes + 4
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.in_dim == 0 || self.mid1 == 0 || self.mid2 == 0 || self.num_classes == 0 {
            return Err(Error::Config("head widths, grid and class count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::Config("batch-norm momentum must lie in [0, 1] and eps be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionHead {
    pub cfg: HeadConfig,
    /// 3×3 conv as an im2col matrix `[9·D × mid1]`, taps ordered by (dy, dx).
    pub conv1: Tensor,
    pub bn_gain: Tensor,
    pub bn_bias: Tensor,
    pub conv2: Tensor,
    pub conv2_bias: Tensor,
    pub pred: Tensor,
    pub pred_bias: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Row-major `[N × D]` tokens as a `[G × G × D]` map.
pub fn tokens_to_grid(tokens: &Tensor, grid: usize) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != grid * grid {
        return Err(Error::dim("tokens_to_grid", s, &[grid * grid, s.get(1).copied().unwrap_or(0)]));
    }
    let d = s[1];
    tokens.clone().reshaped(&[grid, grid, d])
}

impl DetectionHead {
    pub fn new(cfg: HeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = named_rng(seed, "det_head");
        let (d, m1, m2, o) = (cfg.in_dim, cfg.mid1, cfg.mid2, cfg.outputs());
        let conv1 = truncated_normal(&mut rng, &[9 * d, m1], (1.0 / (9 * d) as f64).sqrt()).into_param();
        let conv2 = truncated_normal(&mut rng, &[m1, m2], (1.0 / m1 as f64).sqrt()).into_param();
        let pred = truncated_normal(&mut rng, &[m2, o], 0.01).into_param();
        let mut pb = vec![0.0; o];
        pb[..cfg.num_classes].fill(-((1.0 - PRIOR) / PRIOR).ln());
        Ok(Self {
            conv1,
            bn_gain: Tensor::new(&[1, m1], vec![1.0; m1])?.into_param(),
            bn_bias: Tensor::zeros(&[1, m1]).into_param(),
            conv2,
            conv2_bias: Tensor::zeros(&[1, m2]).into_param(),
            pred,
            pred_bias: Tensor::new(&[1, o], pb)?.into_param(),
            running_mean: vec![0.0; m1],
            running_var: vec![1.0; m1],
            cfg,
        })
    }

    /// Convolution and predictor weights, the count the architecture table
    /// reports.
    pub fn weight_count(&self) -> usize {
        self.conv1.numel() + self.conv2.numel() + self.pred.numel()
    }

    /// Batch-norm affine terms and conv biases.
    pub fn bias_count(&self) -> usize {
        self.bn_gain.numel() + self.bn_bias.numel() + self.conv2_bias.numel() + self.pred_bias.numel()
    }

    /// `[B·G² × D]` cell features to `[B·G² × (C+4)]` raw outputs. In
    /// training mode batch-norm uses batch statistics, which are returned
    /// for the running-average update.
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], x: Var, batch: usize, train: bool) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let gs = self.cfg.grid;
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != batch * gs * gs || shape[1] != self.cfg.in_dim {
            return Err(Error::dim("detection head", &shape, &[batch * gs * gs, self.cfg.in_dim]));
        }
        let cols = g.im2col3x3(x, batch, gs, gs)?;
        let h = g.matmul(cols, vars[0])?;
        let (h, stats) = if train {
            let (n, mean, var) = g.batchnorm(h, self.cfg.bn_eps)?;
            (n, Some((mean, var)))
        } else {
            let shift = Tensor::new(&[1, self.cfg.mid1], self.running_mean.iter().map(|m| -m).collect())?;
            let inv = Tensor::new(
                &[1, self.cfg.mid1],
                self.running_var.iter().map(|v| 1.0 / (v + self.cfg.bn_eps).sqrt()).collect(),
            )?;
            let (sv, iv) = (g.constant(&shift), g.constant(&inv));
            let c = g.add_row(h, sv)?;
            (g.mul_row(c, iv)?, None)
        };
        let h = g.mul_row(h, vars[1])?;
        let h = g.add_row(h, vars[2])?;
        let h = g.gelu(h);
        let h = g.matmul(h, vars[3])?;
        let h = g.add_row(h, vars[4])?;
        let h = g.gelu(h);
        let out = g.matmul(h, vars[5])?;
        Ok((g.add_row(out, vars[6])?, stats))
    }

    pub fn update_running_stats(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.cfg.bn_momentum;
        for (r, v) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }

    /// Inference on one image's final patch tokens `[G² × D]`.
    pub fn predict(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_constant(&mut g);
        let x = g.constant(tokens);
        let (out, _) = self.forward_graph(&mut g, &vars, x, 1, false)?;
        Ok(g.to_tensor(out))
    }

    fn bind_constant(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|t| g.constant(t)).collect()
    }
}

impl Parameters for DetectionHead {
    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1,
            &self.bn_gain,
            &self.bn_bias,
            &self.conv2,
            &self.conv2_bias,
            &self.pred,
            &self.pred_bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1,
            &mut self.bn_gain,
            &mut self.bn_bias,
            &mut self.conv2,
            &mut self.conv2_bias,
            &mut self.pred,
            &mut self.pred_bias,
        ]
    }
}

/// Cell index and `(Δx, Δy, Δw, Δh)` of a box.
pub fn encode_box(b: &BBox, grid: usize) -> (usize, [f64; 4]) {
    let (cx, cy) = b.center();
    let gf = grid as f64;
    let i = ((cx * gf).floor().max(0.0) as usize).min(grid - 1);
    let j = ((cy * gf).floor().max(0.0) as usize).min(grid - 1);
    (j * grid + i, [cx * gf - i as f64, cy * gf - j as f64, b.width().ln(), b.height().ln()])
}

pub fn decode_box(cell: usize, enc: [f64; 4], grid: usize) -> BBox {
    let gf = grid as f64;
    let (i, j) = ((cell % grid) as f64, (cell / grid) as f64);
    BBox::from_center((i + enc[0]) / gf, (j + enc[1]) / gf, enc[2].exp(), enc[3].exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Box encoding from the four raw outputs of a cell.
pub fn raw_to_encoding(raw: &[f64]) -> [f64; 4] {
    [
        sigmoid(raw[0]),
        sigmoid(raw[1]),
        raw[2].clamp(LOG_SIZE_RANGE.0, LOG_SIZE_RANGE.1),
        raw[3].clamp(LOG_SIZE_RANGE.0, LOG_SIZE_RANGE.1),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetGrid {
    pub grid: usize,
    pub classes: Vec<Option<usize>>,
    pub encodings: Vec<Option<[f64; 4]>>,
    pub boxes: Vec<Option<BBox>>,
}

impl TargetGrid {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.iter().enumerate().filter_map(|(i, c)| c.map(|_| i))
    }
}

fn area_order(a: &BBox, b: &BBox) -> std::cmp::Ordering {
    a.area()
        .total_cmp(&b.area())
        .then(b.x_min.total_cmp(&a.x_min))
        .then(b.y_min.total_cmp(&a.y_min))
        .then(a.x_max.total_cmp(&b.x_max))
        .then(a.y_max.total_cmp(&b.y_max))
}

/// One target grid per scene; a cell keeps the largest box centred in it.
pub fn assign_targets(scenes: &[LabeledScene], cfg: &HeadConfig) -> Result<Vec<TargetGrid>> {
    let n = cfg.cells();
    scenes
        .iter()
        .map(|s| {
            let mut t = TargetGrid {
                grid: cfg.grid,
                classes: vec![None; n],
                encodings: vec![None; n],
                boxes: vec![None; n],
            };
            for a in &s.boxes {
                if a.bbox.validate().is_err() || a.bbox.area() <= 0.0 {
                    return Err(Error::Data(format!("scene {}: degenerate box {:?}", s.id, a.bbox)));
                }
                if a.class_id >= cfg.num_classes {
                    return Err(Error::Data(format!("scene {}: class {} out of range", s.id, a.class_id)));
                }
                let (cell, enc) = encode_box(&a.bbox, cfg.grid);
                let wins = match (&t.boxes[cell], t.classes[cell]) {
                    (Some(old), Some(oc)) => match area_order(&a.bbox, old) {
                        std::cmp::Ordering::Equal => a.class_id < oc,
                        o => o == std::cmp::Ordering::Greater,
                    },
                    _ => true,
                };
                if wins {
                    t.classes[cell] = Some(a.class_id);
                    t.encodings[cell] = Some(enc);
                    t.boxes[cell] = Some(a.bbox);
                }
            }
            Ok(t)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

const PROB_CLAMP: f64 = 1e-7;

/// Sigmoid focal loss on `[M × C]` logits against `{0,1}` targets, summed
/// over classes and averaged over the `M` cells.
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &Tensor, fp: FocalParams) -> Result<Var> {
    if g.shape(logits) != targets.shape() {
        return Err(Error::dim("focal loss", g.shape(logits), targets.shape()));
    }
    let cells = targets.rows() as f64;
    let t = targets.data();
    let sign = Tensor::new(targets.shape(), t.iter().map(|v| 2.0 * v - 1.0).collect())?;
    let off = Tensor::new(targets.shape(), t.iter().map(|v| 1.0 - v).collect())?;
    let alpha = Tensor::new(
        targets.shape(),
        t.iter().map(|v| fp.alpha * v + (1.0 - fp.alpha) * (1.0 - v)).collect(),
    )?;
    let p = g.sigmoid(logits);
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (sv, ov, av) = (g.constant(&sign), g.constant(&off), g.constant(&alpha));
    let pt = g.mul(sv, p)?;
    let pt = g.add(pt, ov)?;
    let logp = g.log(pt);
    let one_minus = g.neg(pt);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let modulator = g.powf(one_minus, fp.gamma);
    let w = g.mul(av, modulator)?;
    let terms = g.mul(w, logp)?;
    let s = g.sum(terms);
    Ok(g.scale(s, -1.0 / cells))
}

/// `1 − GIoU` of two valid boxes.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    Ok(1.0 - giou(pred, gt))
}

/// Mean `1 − GIoU` over rows of `[P × 4]` corner boxes
/// `(x_min, y_min, x_max, y_max)`.
pub fn giou_loss_graph(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) || g.shape(pred).get(1) != Some(&4) {
        return Err(Error::dim("giou loss", g.shape(pred), g.shape(gt)));
    }
    let rows = g.shape(pred)[0] as f64;
    let col = |g: &mut Graph, v: Var, k: usize| g.slice_cols(v, k, k + 1);
    let (px0, py0, px1, py1) = (col(g, pred, 0)?, col(g, pred, 1)?, col(g, pred, 2)?, col(g, pred, 3)?);
    let (gx0, gy0, gx1, gy1) = (col(g, gt, 0)?, col(g, gt, 1)?, col(g, gt, 2)?, col(g, gt, 3)?);
    let area = |g: &mut Graph, x0: Var, y0: Var, x1: Var, y1: Var| -> Result<Var> {
        let w = g.sub(x1, x0)?;
        let h = g.sub(y1, y0)?;
        g.mul(w, h)
    };
    let ap = area(g, px0, py0, px1, py1)?;
    let ag = area(g, gx0, gy0, gx1, gy1)?;
    let ix0 = g.maximum(px0, gx0)?;
    let iy0 = g.maximum(py0, gy0)?;
    let ix1 = g.minimum(px1, gx1)?;
    let iy1 = g.minimum(py1, gy1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.clamp(iw, 0.0, f64::INFINITY);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.clamp(ih, 0.0, f64::INFINITY);
    let inter = g.mul(iw, ih)?;
    let union = g.add(ap, ag)?;
    let union = g.sub(union, inter)?;
    let ex0 = g.minimum(px0, gx0)?;
    let ey0 = g.minimum(py0, gy0)?;
    let ex1 = g.maximum(px1, gx1)?;
    let ey1 = g.maximum(py1, gy1)?;
    let enc = area(g, ex0, ey0, ex1, ey1)?;
    let iou = g.div(inter, union)?;
    let gap = g.sub(enc, union)?;
    let pen = g.div(gap, enc)?;
    let gi = g.sub(iou, pen)?;
    let s = g.sum(gi);
    let s = g.scale(s, -1.0 / rows);
    Ok(g.add_scalar(s, 1.0))
}

/// Corner boxes `[P × 4]` from raw box outputs `[P × 4]` at `cells`.
pub fn raw_to_corners(g: &mut Graph, raw: Var, cells: &[usize], grid: usize) -> Result<Var> {
    let gf = grid as f64;
    let p = cells.len();
    let ci = Tensor::new(&[p, 1], cells.iter().map(|c| (c % grid) as f64).collect())?;
    let cj = Tensor::new(&[p, 1], cells.iter().map(|c| (c / grid) as f64).collect())?;
    let (civ, cjv) = (g.constant(&ci), g.constant(&cj));
    let dx = g.slice_cols(raw, 0, 1)?;
    let dx = g.sigmoid(dx);
    let dy = g.slice_cols(raw, 1, 2)?;
    let dy = g.sigmoid(dy);
    let lw = g.slice_cols(raw, 2, 3)?;
    let lw = g.clamp(lw, LOG_SIZE_RANGE.0, LOG_SIZE_RANGE.1);
    let lh = g.slice_cols(raw, 3, 4)?;
    let lh = g.clamp(lh, LOG_SIZE_RANGE.0, LOG_SIZE_RANGE.1);
    let cx = g.add(dx, civ)?;
    let cx = g.scale(cx, 1.0 / gf);
    let cy = g.add(dy, cjv)?;
    let cy = g.scale(cy, 1.0 / gf);
    let hw = g.exp(lw);
    let hw = g.scale(hw, 0.5);
    let hh = g.exp(lh);
    let hh = g.scale(hh, 0.5);
    let x0 = g.sub(cx, hw)?;
    let y0 = g.sub(cy, hh)?;
    let x1 = g.add(cx, hw)?;
    let y1 = g.add(cy, hh)?;
    g.concat_cols(&[x0, y0, x1, y1])
}

/// Detection loss parts for a batch of raw outputs `[B·G² × (C+4)]`.
pub struct DetLoss {
    pub focal: Var,
    pub giou: Option<Var>,
    pub total: Var,
}

pub fn detection_loss(g: &mut Graph, out: Var, targets: &[&TargetGrid], cfg: &HeadConfig, fp: FocalParams) -> Result<DetLoss> {
    let (c, cells) = (cfg.num_classes, cfg.cells());
    let m = targets.len() * cells;
    let mut onehot = vec![0.0; m * c];
    let mut pos_rows = Vec::new();
    let mut pos_cells = Vec::new();
    let mut gt = Vec::new();
    for (b, t) in targets.iter().enumerate() {
        for cell in t.positives() {
            let r = b * cells + cell;
            onehot[r * c + t.classes[cell].expect("positive")] = 1.0;
            pos_rows.push(r);
            pos_cells.push(cell);
            let bb = t.boxes[cell].expect("positive box");
            gt.extend_from_slice(&[bb.x_min, bb.y_min, bb.x_max, bb.y_max]);
        }
    }
    let logits = g.slice_cols(out, 0, c)?;
    let focal = focal_loss(g, logits, &Tensor::new(&[m, c], onehot)?, fp)?;
    if pos_rows.is_empty() {
        return Ok(DetLoss { focal, giou: None, total: focal });
    }
    let raw = g.slice_cols(out, c, c + 4)?;
    let raw = g.select_rows(raw, &pos_rows)?;
    let pred = raw_to_corners(g, raw, &pos_cells, cfg.grid)?;
    let gtv = g.constant_from(&[pos_rows.len(), 4], gt)?;
    let giou = giou_loss_graph(g, pred, gtv)?;
    let total = g.add(focal, giou)?;
    Ok(DetLoss { focal, giou: Some(giou), total })
}

/// Greedy per-class suppression; output sorted by descending score.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && crate::boxes::iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}

/// Thresholded detections from one raw output grid `[G² × (C+4)]`.
pub fn decode(pred: &Tensor, threshold: f64, nms_iou: f64, cfg: &HeadConfig) -> Result<Vec<Detection>> {
    if pred.shape() != [cfg.cells(), cfg.outputs()] {
        return Err(Error::dim("decode", pred.shape(), &[cfg.cells(), cfg.outputs()]));
    }
    let c = cfg.num_classes;
    let mut dets = Vec::new();
    for cell in 0..cfg.cells() {
        let row = pred.row(cell);
        let (class_id, logit) = row[..c]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
        let score = sigmoid(logit);
        if score <= threshold {
            continue;
        }
        let b = decode_box(cell, raw_to_encoding(&row[c..]), cfg.grid);
        let clipped = BBox::raw(b.x_min.max(0.0), b.y_min.max(0.0), b.x_max.min(1.0), b.y_max.min(1.0));
        if clipped.validate().is_ok() {
            dets.push(Detection { bbox: clipped, class_id, score });
        }
    }
    Ok(nms(&dets, nms_iou))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub focal: FocalParams,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            optim: OptimConfig {
                base_lr: 1e-4,
                weight_decay: 1e-4,
                warmup_epochs: 0,
                total_epochs: 20,
                ..OptimConfig::default()
            },
            focal: FocalParams::default(),
            seed: 0,
        }
    }
}

impl HeadTrainConfig {
    /// Schedule used by the desk experiments: a randomly initialised
    /// backbone needs a far larger head step than pretrained features.
    pub fn desk() -> Self {
        let epochs = 60;
        Self {
            epochs,
            optim: OptimConfig {
                base_lr: 3e-3,
                total_epochs: epochs,
                ..Self::default().optim
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("head epochs and batch size must be positive".into()));
        }
        if self.optim.total_epochs != self.epochs {
            return Err(Error::Config(format!(
                "head schedule spans {} epochs but the run has {}",
                self.optim.total_epochs, self.epochs
            )));
        }
        self.optim.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadMetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_focal: f64,
    pub loss_giou: f64,
    pub loss_det: f64,
}

pub const HEAD_METRICS_HEADER: &str = "epoch,lr,loss_focal,loss_giou,loss_det";

pub fn head_metrics_csv(rows: &[HeadMetricsRow]) -> String {
    let mut s = format!("{HEAD_METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.lr, r.loss_focal, r.loss_giou, r.loss_det));
    }
    s
}

pub const PREDICTIONS_HEADER: &str = "image_id,class,score,x_min,y_min,x_max,y_max";

/// One row per detection, images in the given order.
pub fn predictions_csv(image_ids: &[usize], preds: &[Vec<Detection>]) -> String {
    let mut s = format!("{PREDICTIONS_HEADER}\n");
    for (id, dets) in image_ids.iter().zip(preds) {
        for d in dets {
            let b = &d.bbox;
            s.push_str(&format!("{id},{},{},{},{},{},{}\n", d.class_id, d.score, b.x_min, b.y_min, b.x_max, b.y_max));
        }
    }
    s
}

/// Final patch tokens of every image under the frozen backbone and prompts.
pub fn encode_images(backbone: &Backbone, prompts: Option<&Tensor>, images: &[&Raster]) -> Result<Vec<Tensor>> {
    images.iter().map(|im| Ok(backbone.forward(im, prompts)?.0)).collect()
}

fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts[0].cols();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect::<Vec<_>>();
    Tensor::new(&[data.len() / cols, cols], data)
}

/// Detection loss of one batch of cached features and its gradient for
/// every tensor of the head's [`Parameters::params`], batch-norm in
/// training mode.
pub fn head_loss_gradients(head: &DetectionHead, features: &[&Tensor], scenes: &[LabeledScene], fp: FocalParams) -> Result<(f64, Vec<Vec<f64>>)> {
    let targets = assign_targets(scenes, &head.cfg)?;
    let tr: Vec<&TargetGrid> = targets.iter().collect();
    let (g, vars, loss, _) = head_batch(head, features, &tr, fp)?;
    let grads = g.backward(loss.total)?;
    let out = head
        .params()
        .iter()
        .zip(&vars)
        .map(|(t, &v)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], |d| d.to_vec()))
        .collect();
    Ok((g.scalar(loss.total), out))
}

fn head_batch(head: &DetectionHead, feats: &[&Tensor], targets: &[&TargetGrid], fp: FocalParams) -> Result<(Graph, Vec<Var>, DetLoss, (Vec<f64>, Vec<f64>))> {
    let mut g = Graph::new();
    let vars = Parameters::bind(head, &mut g);
    let x = g.constant(&stack_rows(feats)?);
    let (out, stats) = head.forward_graph(&mut g, &vars, x, feats.len(), true)?;
    let loss = detection_loss(&mut g, out, targets, &head.cfg, fp)?;
    Ok((g, vars, loss, stats.expect("training mode")))
}

/// Trains a fresh head on cached token features of labeled scenes.
pub fn train_head(head_cfg: HeadConfig, features: &[Tensor], scenes: &[LabeledScene], cfg: &HeadTrainConfig) -> Result<(DetectionHead, Vec<HeadMetricsRow>)> {
    let head = DetectionHead::new(head_cfg, cfg.seed)?;
    train_head_from(head, features, scenes, cfg)
}

/// Continues training `head`, e.g. fine-tuning a source head.
pub fn train_head_from(mut head: DetectionHead, features: &[Tensor], scenes: &[LabeledScene], cfg: &HeadTrainConfig) -> Result<(DetectionHead, Vec<HeadMetricsRow>)> {
    cfg.validate()?;
    if features.len() != scenes.len() || scenes.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} feature maps for {} labeled scenes",
            features.len(),
            scenes.len()
        )));
    }
    let targets = assign_targets(scenes, &head.cfg)?;
    let mut optim = OptimState::new(cfg.optim.clone(), &head.params());
    let b = cfg.batch_size.min(scenes.len());
    let steps = scenes.len() / b;
    let mut rows = Vec::with_capacity(cfg.epochs + 1);

    let first: Vec<&Tensor> = features[..b].iter().collect();
    let ft: Vec<&TargetGrid> = targets[..b].iter().collect();
    let (g, _, l, _) = head_batch(&head, &first, &ft, cfg.focal)?;
    rows.push(HeadMetricsRow {
        epoch: 0,
        lr: 0.0,
        loss_focal: g.scalar(l.focal),
        loss_giou: l.giou.map_or(0.0, |v| g.scalar(v)),
        loss_det: g.scalar(l.total),
    });

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, &cfg.optim)?;
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng_from(indexed_seed(cfg.seed, "head_shuffle", epoch as u64)));
        let mut acc = [0.0; 3];
        for s in 0..steps {
            let idx = &order[s * b..(s + 1) * b];
            let fs: Vec<&Tensor> = idx.iter().map(|&i| &features[i]).collect();
            let ts: Vec<&TargetGrid> = idx.iter().map(|&i| &targets[i]).collect();
            let (g, vars, l, (mean, var)) = head_batch(&head, &fs, &ts, cfg.focal)?;
            acc[0] += g.scalar(l.focal);
            acc[1] += l.giou.map_or(0.0, |v| g.scalar(v));
            acc[2] += g.scalar(l.total);
            let grads = g.backward(l.total)?;
            head.zero_grad();
            head.accumulate(&vars, &grads);
            adamw_step(head.params_mut(), &mut optim, lr)?;
            head.update_running_stats(&mean, &var);
        }
        let n = steps as f64;
        rows.push(HeadMetricsRow {
            epoch: epoch + 1,
            lr,
            loss_focal: acc[0] / n,
            loss_giou: acc[1] / n,
            loss_det: acc[2] / n,
        });
    }
    Ok((head, rows))
}

/// Detections for every image under frozen backbone, prompts and head.
pub fn detect_images(backbone: &Backbone, prompts: Option<&Tensor>, head: &DetectionHead, images: &[&Raster], threshold: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
    images
        .iter()
        .map(|im| {
            let tokens = backbone.forward(im, prompts)?.0;
            decode(&head.predict(&tokens)?, threshold, nms_iou, &head.cfg)
        })
        .collect()
}
