//! Detection metrics, few-shot subsets and corruption transforms.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::boxes::iou;
use crate::datagen::{Annotation, LabeledScene};
use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::image::Raster;
use crate::rng::{named_rng, rng_from};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Greedy score-descending matching of one class in one image. Returns the
/// TP flag of each detection (in the given order) and the unmatched GT count.
pub fn match_image(dets: &[&Detection], gts: &[&Annotation], iou_thr: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou(&dets[i].bbox, &g.bbox);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            tp[i] = true;
        }
    }
    let unmatched = taken.iter().filter(|t| !**t).count();
    (tp, unmatched)
}

/// All-point AP from scored TP flags and the GT count.
pub fn ap_from_flags(scored: &mut [(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(scored.len());
    for (k, &(_, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // monotone envelope, then area over recall steps
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in points {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    Some(ap)
}

struct ClassCounts {
    scored: Vec<(f64, bool)>,
    num_gt: usize,
}

fn class_counts(preds: &[Vec<Detection>], gts: &[Vec<Annotation>], class: usize, iou_thr: f64, max_dets: usize) -> ClassCounts {
    let mut scored = Vec::new();
    let mut num_gt = 0;
    for (p, g) in preds.iter().zip(gts) {
        let mut top: Vec<&Detection> = p.iter().collect();
        top.sort_by(|a, b| b.score.total_cmp(&a.score));
        top.truncate(max_dets);
        let d: Vec<&Detection> = top.into_iter().filter(|d| d.class_id == class).collect();
        let gg: Vec<&Annotation> = g.iter().filter(|a| a.class_id == class).collect();
        num_gt += gg.len();
        let (tp, _) = match_image(&d, &gg, iou_thr);
        scored.extend(d.iter().zip(tp).map(|(d, t)| (d.score, t)));
    }
    ClassCounts { scored, num_gt }
}

/// AP of one class over a dataset; `None` when the class has no GT.
pub fn average_precision(preds: &[Vec<Detection>], gts: &[Vec<Annotation>], class: usize, iou_thr: f64) -> Option<f64> {
    let mut c = class_counts(preds, gts, class, iou_thr, usize::MAX);
    ap_from_flags(&mut c.scored, c.num_gt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub ap50: f64,
    pub ap5095: f64,
    /// Precision at IoU 0.5 over all kept detections.
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapSuite {
    pub map50: f64,
    pub map5095: f64,
    pub ar: f64,
    /// Classes with at least one GT; the rest are absent, not zero.
    pub per_class: Vec<ClassMetrics>,
}

pub const MAX_DETS: usize = 100;

pub fn map_suite(preds: &[Vec<Detection>], gts: &[Vec<Annotation>], num_classes: usize) -> Result<MapSuite> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Contract(format!(
            "metric suite needs one prediction list per image, got {} for {}",
            preds.len(),
            gts.len()
        )));
    }
    let ths = coco_thresholds();
    let mut per_class = Vec::new();
    let mut ar_acc = 0.0;
    for class in 0..num_classes {
        let mut aps = Vec::with_capacity(ths.len());
        let mut recalls = Vec::with_capacity(ths.len());
        let mut at50 = (0.0, 0.0);
        let mut present = true;
        for (k, &t) in ths.iter().enumerate() {
            let mut c = class_counts(preds, gts, class, t, MAX_DETS);
            let tp = c.scored.iter().filter(|s| s.1).count();
            if k == 0 {
                let prec = if c.scored.is_empty() { 0.0 } else { tp as f64 / c.scored.len() as f64 };
                at50 = (prec, if c.num_gt > 0 { tp as f64 / c.num_gt as f64 } else { 0.0 });
            }
            match ap_from_flags(&mut c.scored, c.num_gt) {
                Some(ap) => {
                    aps.push(ap);
                    recalls.push(tp as f64 / c.num_gt as f64);
                }
                None => present = false,
            }
        }
        if !present {
            continue;
        }
        ar_acc += recalls.iter().sum::<f64>() / recalls.len() as f64;
        per_class.push(ClassMetrics {
            class_id: class,
            ap50: aps[0],
            ap5095: aps.iter().sum::<f64>() / aps.len() as f64,
            precision: at50.0,
            recall: at50.1,
        });
    }
    if per_class.is_empty() {
        return Err(Error::Contract("no ground-truth boxes in the evaluation set".into()));
    }
    let n = per_class.len() as f64;
    Ok(MapSuite {
        map50: per_class.iter().map(|c| c.ap50).sum::<f64>() / n,
        map5095: per_class.iter().map(|c| c.ap5095).sum::<f64>() / n,
        ar: ar_acc / n,
        per_class,
    })
}

pub const METRICS_HEADER: &str = "class,ap50,ap5095,precision,recall";

/// Per-class rows plus an `all` row of class means.
pub fn suite_csv(s: &MapSuite) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for c in &s.per_class {
        out.push_str(&format!("{},{},{},{},{}\n", c.class_id, c.ap50, c.ap5095, c.precision, c.recall));
    }
    let n = s.per_class.len() as f64;
    let mp = s.per_class.iter().map(|c| c.precision).sum::<f64>() / n;
    let mr = s.per_class.iter().map(|c| c.recall).sum::<f64>() / n;
    out.push_str(&format!("all,{},{},{},{}\n", s.map50, s.map5095, mp, mr));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corruption {
    Noise,
    Blur,
    Weather,
    Digital,
}

impl Corruption {
    pub const ALL: [Corruption; 4] = [Corruption::Noise, Corruption::Blur, Corruption::Weather, Corruption::Digital];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::Noise => "noise",
            Corruption::Blur => "blur",
            Corruption::Weather => "weather",
            Corruption::Digital => "digital",
        }
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption category '{s}' (noise, blur, weather, digital)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub category: Corruption,
    pub severity: u32,
}

pub const MAX_SEVERITY: u32 = 5;

pub fn noise_sigma(severity: u32) -> f64 {
    0.02 * severity as f64
}

pub fn pixelation_factor(severity: u32) -> usize {
    1 << severity.min(4)
}

fn gaussian_blur(image: &Raster, radius: usize) -> Raster {
    let sigma = radius as f64 / 2.0;
    let kernel: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let r = radius as isize;
    let pass = |src: &Raster, horizontal: bool| {
        let mut out = src.clone();
        for c in 0..src.channels() {
            for y in 0..src.height() {
                for x in 0..src.width() {
                    let v = kernel
                        .iter()
                        .enumerate()
                        .map(|(i, w)| {
                            let o = i as isize - r;
                            let (sx, sy) = if horizontal { (x as isize + o, y as isize) } else { (x as isize, y as isize + o) };
                            w * src.get_clamped(sx, sy, c)
                        })
                        .sum();
                    out.set(x, y, c, v);
                }
            }
        }
        out
    };
    pass(&pass(image, true), false)
}

fn pixelate(image: &Raster, f: usize) -> Raster {
    let mut out = image.clone();
    for c in 0..image.channels() {
        for by in (0..image.height()).step_by(f) {
            for bx in (0..image.width()).step_by(f) {
                let ys = by..(by + f).min(image.height());
                let xs = bx..(bx + f).min(image.width());
                let cells = || ys.clone().flat_map(|y| xs.clone().map(move |x| (x, y)));
                let first = image.get(bx, by, c);
                if cells().all(|(x, y)| image.get(x, y, c) == first) {
                    continue;
                }
                let n = (ys.len() * xs.len()) as f64;
                let mean = cells().map(|(x, y)| image.get(x, y, c)).sum::<f64>() / n;
                for y in ys.clone() {
                    for x in xs.clone() {
                        out.set(x, y, c, mean);
                    }
                }
            }
        }
    }
    out
}

/// Low-frequency haze in `[0, 1]`: a few random-phase sinusoids.
fn haze_field(w: usize, h: usize, seed: u64) -> Vec<f64> {
    use rand::Rng as _;
    let mut rng = named_rng(seed, "haze");
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let s: f64 = waves
                .iter()
                .map(|(a, b, p)| (std::f64::consts::TAU * (a * u + b * v) + p).sin())
                .sum();
            out.push(0.5 + s / 6.0);
        }
    }
    out
}

pub fn corrupt(image: &Raster, spec: CorruptionSpec, seed: u64) -> Result<Raster> {
    if spec.severity > MAX_SEVERITY {
        return Err(Error::Contract(format!("severity {} outside 0..={MAX_SEVERITY}", spec.severity)));
    }
    if spec.severity == 0 {
        return Ok(image.clone());
    }
    let s = spec.severity;
    let mut out = match spec.category {
        Corruption::Noise => {
            let normal = Normal::new(0.0, noise_sigma(s)).expect("positive sigma");
            let mut rng = rng_from(seed);
            let mut out = image.clone();
            out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            out
        }
        Corruption::Blur => gaussian_blur(image, s as usize),
        Corruption::Weather => {
            let contrast = 1.0 - 0.1 * s as f64;
            let haze = haze_field(image.width(), image.height(), seed);
            let mut out = image.clone();
            let ch = image.channels();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                *v = (*v - 0.5) * contrast + 0.5 + 0.06 * s as f64 * haze[k / ch];
            }
            out
        }
        Corruption::Digital => pixelate(image, pixelation_factor(s)),
    };
    out.clamp_unit();
    Ok(out)
}

/// Seeded prefix of a fixed permutation, so smaller fractions nest inside
/// larger ones under the same seed.
pub fn few_shot_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Contract(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = (fraction * n as f64).round() as usize;
    if k == 0 {
        return Err(Error::Contract(format!(
            "fraction {fraction} of {n} scenes rounds to an empty subset; use at least {:.4}",
            0.5 / n.max(1) as f64
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut named_rng(seed, "few_shot"));
    perm.truncate(k);
    Ok(perm)
}

pub fn few_shot_subset(labeled: &[LabeledScene], fraction: f64, seed: u64) -> Result<Vec<LabeledScene>> {
    Ok(few_shot_indices(labeled.len(), fraction, seed)?
        .into_iter()
        .map(|i| labeled[i].clone())
        .collect())
}

#[cfg(test)]
mod tests;
