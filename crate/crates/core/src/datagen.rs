//! Synthetic two-domain road-defect scenes and the dataset container.
//!
//! A scene is a textured single-channel background with up to a handful of
//! dark defects: thin cracks (class 0), elliptical potholes (class 1) and
//! flat rectangular patches (class 2). Every defect records the tight box
//! of the pixels it touches.
//!
//! # Container layout
//!
//! ```text
//! PRDS 1
//! width <w> height <h> channels <c> count <n>
//! scene <id> <source|target> <seed> <box count>
//! box <class> <x_min> <y_min> <x_max> <y_max>     (box count lines)
//! raster <byte count>
//! <byte count raw little-endian f64 values>\n
//! ...                                             (n scenes)
//! ```
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! lossless.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::image::Raster;
use crate::rng::{indexed_seed, rng_from, Rng};

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["crack", "pothole", "patch"];

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub image_size: usize,
    /// Background stripe frequency in cycles per image.
    pub texture_freq: f64,
    pub base_brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub defect_contrast: f64,
    pub crack_width_range: (f64, f64),
    pub pothole_radius_range: (f64, f64),
    /// How far this spec was moved from its source, 0 for a source spec.
    pub shift_knob: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self::source(64)
    }
}

impl DomainSpec {
    /// Bright, low-frequency, clean pavement with high-contrast defects.
    pub fn source(image_size: usize) -> Self {
        Self {
            image_size,
            texture_freq: 3.0,
            base_brightness: 0.6,
            contrast: 1.0,
            noise_sigma: 0.02,
            defect_contrast: 0.35,
            crack_width_range: (2.0, 3.0),
            pothole_radius_range: (3.0, 6.0),
            shift_knob: 0.0,
        }
    }

    /// The far end of the shift axis: dark, busy, noisy, faint defects.
    pub fn far(&self) -> Self {
        Self {
            image_size: self.image_size,
            texture_freq: 11.0,
            base_brightness: 0.5,
            contrast: 1.8,
            noise_sigma: 0.07,
            defect_contrast: 0.22,
            crack_width_range: (2.5, 3.5),
            pothole_radius_range: (4.0, 7.0),
            shift_knob: 1.0,
        }
    }

    /// Field-wise linear interpolation toward [`DomainSpec::far`].
    pub fn shifted(&self, knob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&knob) {
            return Err(Error::Config(format!("shift knob {knob} outside [0, 1]")));
        }
        let far = self.far();
        let l = |a: f64, b: f64| a + knob * (b - a);
        let lr = |a: (f64, f64), b: (f64, f64)| (l(a.0, b.0), l(a.1, b.1));
        Ok(Self {
            image_size: self.image_size,
            texture_freq: l(self.texture_freq, far.texture_freq),
            base_brightness: l(self.base_brightness, far.base_brightness),
            contrast: l(self.contrast, far.contrast),
            noise_sigma: l(self.noise_sigma, far.noise_sigma),
            defect_contrast: l(self.defect_contrast, far.defect_contrast),
            crack_width_range: lr(self.crack_width_range, far.crack_width_range),
            pothole_radius_range: lr(self.pothole_radius_range, far.pothole_radius_range),
            shift_knob: knob,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.crack_width_range, self.pothole_radius_range];
        if self.image_size < 16
            || self.noise_sigma < 0.0
            || self.defect_contrast <= 0.0
            || ranges.iter().any(|r| !(r.0 > 0.0 && r.0 <= r.1))
        {
            return Err(Error::Config(format!("invalid domain spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub id: usize,
    pub image: Raster,
    pub boxes: Vec<Annotation>,
    pub domain: Domain,
    pub seed: u64,
}

/// Intermediate render products kept for label checks.
#[derive(Clone, Debug)]
pub struct SceneLayers {
    /// The scene before any defect was drawn.
    pub background: Raster,
    /// Per pixel, the index of the last defect covering it.
    pub defect_index: Vec<Option<usize>>,
}

impl SceneLayers {
    pub fn is_defect(&self, x: usize, y: usize, width: usize) -> bool {
        self.defect_index[y * width + x].is_some()
    }
}

const RETRY_BUDGET: usize = 64;

fn draw(rng: &mut Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

fn render_background(spec: &DomainSpec, rng: &mut Rng) -> Raster {
    let s = spec.image_size;
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    // a few low-frequency blotch waves
    let blotches: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-2.5..2.5),
                rng.random_range(-2.5..2.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("noise sigma");
    let (ct, st) = (theta.cos(), theta.sin());
    let mut data = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let (u, v) = ((x as f64 + 0.5) / s as f64, (y as f64 + 0.5) / s as f64);
            let stripe = (std::f64::consts::TAU * spec.texture_freq * (u * ct + v * st) + phase).sin();
            let blotch: f64 = blotches
                .iter()
                .map(|&(fx, fy, p)| (std::f64::consts::TAU * (fx * u + fy * v) + p).cos())
                .sum::<f64>()
                / 4.0;
            let n = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            let val = spec.base_brightness + spec.contrast * (0.05 * stripe + 0.06 * blotch) + n;
            data.push(val.clamp(0.0, 1.0));
        }
    }
    Raster::new(s, s, 1, data).expect("background extents")
}

/// Geometry of one defect in pixel units.
#[derive(Clone, Debug)]
enum Shape {
    Crack { points: Vec<(f64, f64)>, width: f64 },
    Pothole { cx: f64, cy: f64, rx: f64, ry: f64 },
    Patch { x0: f64, y0: f64, x1: f64, y1: f64 },
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

impl Shape {
    /// Conservative pixel extent `(x0, y0, x1, y1)`.
    fn extent(&self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Crack { points, width } => {
                let h = width / 2.0 + 1.0;
                points.iter().fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |e, p| {
                    (e.0.min(p.0 - h), e.1.min(p.1 - h), e.2.max(p.0 + h), e.3.max(p.1 + h))
                })
            }
            Shape::Pothole { cx, cy, rx, ry } => (cx - rx - 1.0, cy - ry - 1.0, cx + rx + 1.0, cy + ry + 1.0),
            Shape::Patch { x0, y0, x1, y1 } => (x0 - 1.0, y0 - 1.0, x1 + 1.0, y1 + 1.0),
        }
    }

    /// Darkening weight at pixel centre `p`, `None` when outside.
    fn weight(&self, p: (f64, f64)) -> Option<f64> {
        match self {
            Shape::Crack { points, width } => {
                let d = points
                    .windows(2)
                    .map(|w| seg_dist(p, w[0], w[1]))
                    .fold(f64::INFINITY, f64::min);
                (d <= width / 2.0).then_some(1.0)
            }
            Shape::Pothole { cx, cy, rx, ry } => {
                let r2 = ((p.0 - cx) / rx).powi(2) + ((p.1 - cy) / ry).powi(2);
                (r2 <= 1.0).then_some(1.0 + 0.3 * (1.0 - r2))
            }
            Shape::Patch { x0, y0, x1, y1 } => {
                (p.0 >= *x0 && p.0 <= *x1 && p.1 >= *y0 && p.1 <= *y1).then_some(0.8)
            }
        }
    }
}

fn sample_shape(class_id: usize, spec: &DomainSpec, rng: &mut Rng) -> Shape {
    let s = spec.image_size as f64;
    let k = s / 64.0;
    let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
    match class_id {
        0 => {
            let width = draw(rng, spec.crack_width_range) * k;
            let mut dir = rng.random_range(0.0..std::f64::consts::TAU);
            let n = rng.random_range(3..=5);
            let seg = rng.random_range(3.0..5.0) * k;
            // walk out from the centre in both directions
            let mut fwd = vec![(cx, cy)];
            for _ in 0..n / 2 + 1 {
                dir += rng.random_range(-0.5..0.5);
                let l = fwd[fwd.len() - 1];
                fwd.push((l.0 + seg * dir.cos(), l.1 + seg * dir.sin()));
            }
            let mut back = vec![(cx, cy)];
            let mut bdir = dir + std::f64::consts::PI;
            for _ in 0..(n - n / 2).max(1) {
                bdir += rng.random_range(-0.5..0.5);
                let l = back[back.len() - 1];
                back.push((l.0 + seg * bdir.cos(), l.1 + seg * bdir.sin()));
            }
            back.reverse();
            back.pop();
            back.extend(fwd);
            Shape::Crack { points: back, width }
        }
        1 => {
            let rx = draw(rng, spec.pothole_radius_range) * k;
            let ry = rx * rng.random_range(0.65..1.0);
            Shape::Pothole { cx, cy, rx, ry }
        }
        _ => {
            let (w, h) = (rng.random_range(10.0..20.0) * k, rng.random_range(8.0..16.0) * k);
            Shape::Patch {
                x0: cx - w / 2.0,
                y0: cy - h / 2.0,
                x1: cx + w / 2.0,
                y1: cy + h / 2.0,
            }
        }
    }
}

/// Renders a scene and keeps the layers used for label checks.
pub fn generate_scene_layers(spec: &DomainSpec, n_defects: usize, seed: u64) -> Result<(LabeledScene, SceneLayers)> {
    spec.validate()?;
    let mut rng = rng_from(seed);
    let s = spec.image_size;
    let background = render_background(spec, &mut rng);
    let mut image = background.clone();
    let mut defect_index = vec![None; s * s];
    let mut boxes: Vec<Annotation> = Vec::with_capacity(n_defects);
    let min_sep = 10.0 * s as f64 / 64.0;

    for d in 0..n_defects {
        let class_id = rng.random_range(0..NUM_CLASSES);
        let mut placed = None;
        for _ in 0..RETRY_BUDGET {
            let shape = sample_shape(class_id, spec, &mut rng);
            let (x0, y0, x1, y1) = shape.extent();
            if x0 < 0.0 || y0 < 0.0 || x1 > s as f64 || y1 > s as f64 {
                continue;
            }
            let mut pix = Vec::new();
            for y in y0.floor() as usize..(y1.ceil() as usize).min(s) {
                for x in x0.floor() as usize..(x1.ceil() as usize).min(s) {
                    if let Some(w) = shape.weight((x as f64 + 0.5, y as f64 + 0.5)) {
                        pix.push((x, y, w));
                    }
                }
            }
            if pix.is_empty() {
                continue;
            }
            let bx0 = pix.iter().map(|p| p.0).min().expect("non-empty");
            let by0 = pix.iter().map(|p| p.1).min().expect("non-empty");
            let bx1 = pix.iter().map(|p| p.0).max().expect("non-empty") + 1;
            let by1 = pix.iter().map(|p| p.1).max().expect("non-empty") + 1;
            let bbox = BBox::raw(
                bx0 as f64 / s as f64,
                by0 as f64 / s as f64,
                bx1 as f64 / s as f64,
                by1 as f64 / s as f64,
            );
            let (cx, cy) = bbox.center();
            let clash = boxes.iter().any(|b| {
                let (ox, oy) = b.bbox.center();
                ((cx - ox).powi(2) + (cy - oy).powi(2)).sqrt() * s as f64 <= min_sep
            });
            if clash {
                continue;
            }
            placed = Some((pix, bbox));
            break;
        }
        let (pix, bbox) = placed.ok_or_else(|| {
            Error::Data(format!(
                "could not place defect {d} of scene seed {seed} within {RETRY_BUDGET} attempts"
            ))
        })?;
        let strength = spec.defect_contrast * rng.random_range(0.9..1.1);
        for (x, y, w) in pix {
            let v = image.get(x, y, 0);
            let v = if class_id == 2 {
                // flatten the texture inside repaired patches
                let flat = spec.base_brightness + 0.3 * (v - spec.base_brightness);
                flat - strength * w
            } else {
                v - strength * w
            };
            image.set(x, y, 0, v.clamp(0.0, 1.0));
            defect_index[y * s + x] = Some(d);
        }
        boxes.push(Annotation { class_id, bbox });
    }

    Ok((
        LabeledScene {
            id: 0,
            image,
            boxes,
            domain: Domain::Source,
            seed,
        },
        SceneLayers {
            background,
            defect_index,
        },
    ))
}

pub fn generate_scene(spec: &DomainSpec, n_defects: usize, seed: u64) -> Result<LabeledScene> {
    generate_scene_layers(spec, n_defects, seed).map(|(s, _)| s)
}

/// Scene count per image is drawn uniformly from `1..=max_defects`.
pub fn generate_domain(spec: &DomainSpec, domain: Domain, n: usize, max_defects: usize, seed: u64) -> Result<Vec<LabeledScene>> {
    (0..n)
        .map(|i| {
            let sseed = indexed_seed(seed, domain.as_str(), i as u64);
            let k = 1 + (sseed % max_defects.max(1) as u64) as usize;
            let mut scene = generate_scene(spec, k, sseed)?;
            scene.id = i;
            scene.domain = domain;
            Ok(scene)
        })
        .collect()
}

pub fn generate_domain_pair(source_spec: &DomainSpec, shift_knob: f64, n_per_domain: usize, seed: u64) -> Result<(Vec<LabeledScene>, Vec<LabeledScene>)> {
    let target_spec = source_spec.shifted(shift_knob)?;
    let src = generate_domain(source_spec, Domain::Source, n_per_domain, 3, seed)?;
    let tgt = generate_domain(&target_spec, Domain::Target, n_per_domain, 3, seed)?;
    Ok((src, tgt))
}

/// Linear MMD between flattened rasters, per pixel.
pub fn raw_pixel_mmd(a: &[LabeledScene], b: &[LabeledScene]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("raw pixel MMD needs two non-empty sets".into()));
    }
    let p = a[0].image.data().len();
    let mean = |s: &[LabeledScene]| -> Result<Vec<f64>> {
        let mut m = vec![0.0; p];
        for sc in s {
            if sc.image.data().len() != p {
                return Err(Error::Data("scenes differ in raster size".into()));
            }
            m.iter_mut().zip(sc.image.data()).for_each(|(a, v)| *a += v);
        }
        m.iter_mut().for_each(|a| *a /= s.len() as f64);
        Ok(m)
    };
    let (ma, mb) = (mean(a)?, mean(b)?);
    Ok(ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / p as f64)
}

pub fn encode_dataset(scenes: &[LabeledScene]) -> Result<Vec<u8>> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::InsufficientData("cannot save an empty dataset".into()))?;
    let (w, h, c) = (first.image.width(), first.image.height(), first.image.channels());
    let mut out = Vec::new();
    let head = format!("PRDS 1\nwidth {w} height {h} channels {c} count {}\n", scenes.len());
    out.extend_from_slice(head.as_bytes());
    for sc in scenes {
        if (sc.image.width(), sc.image.height(), sc.image.channels()) != (w, h, c) {
            return Err(Error::Data(format!("scene {} has a different raster size", sc.id)));
        }
        let mut text = String::new();
        let _ = writeln!(text, "scene {} {} {} {}", sc.id, sc.domain.as_str(), sc.seed, sc.boxes.len());
        for a in &sc.boxes {
            let b = a.bbox;
            let _ = writeln!(text, "box {} {} {} {} {}", a.class_id, b.x_min, b.y_min, b.x_max, b.y_max);
        }
        let _ = writeln!(text, "raster {}", sc.image.data().len() * 8);
        out.extend_from_slice(text.as_bytes());
        for v in sc.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(b'\n');
    }
    Ok(out)
}

pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
    pub(crate) line: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0, line: 0 }
    }

    pub(crate) fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            location: format!("line {}, byte {}", self.line, self.pos),
            message: message.into(),
        }
    }

    pub(crate) fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err("unexpected end of file"))?;
        let text = std::str::from_utf8(&rest[..end]).map_err(|_| self.err("header line is not UTF-8"))?;
        self.pos += end + 1;
        self.line += 1;
        Ok(text)
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "data truncated: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub(crate) fn fields<'a>(c: &Cursor<'_>, line: &'a str, tag: &str, n: usize) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.first() != Some(&tag) || parts.len() != n + 1 {
        return Err(c.err(format!("expected '{tag}' with {n} fields, found '{line}'")));
    }
    Ok(parts[1..].to_vec())
}

pub(crate) fn num<T: std::str::FromStr>(c: &Cursor<'_>, s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| c.err(format!("bad {what} '{s}'")))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<LabeledScene>> {
    let mut c = Cursor::new(bytes);
    if c.line()? != "PRDS 1" {
        return Err(c.err("missing 'PRDS 1' magic"));
    }
    let l = c.line()?;
    let parts: Vec<&str> = l.split_whitespace().collect();
    if parts.len() != 8 || parts[0] != "width" || parts[2] != "height" || parts[4] != "channels" || parts[6] != "count" {
        return Err(c.err(format!("bad dimension line '{l}'")));
    }
    let w: usize = num(&c, parts[1], "width")?;
    let h: usize = num(&c, parts[3], "height")?;
    let ch: usize = num(&c, parts[5], "channels")?;
    let count: usize = num(&c, parts[7], "count")?;
    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        let l = c.line()?;
        let f = fields(&c, l, "scene", 4)?;
        let id: usize = num(&c, f[0], "scene id")?;
        let domain = match f[1] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(c.err(format!("unknown domain '{other}'"))),
        };
        let seed: u64 = num(&c, f[2], "seed")?;
        let nb: usize = num(&c, f[3], "box count")?;
        let mut boxes = Vec::with_capacity(nb);
        for _ in 0..nb {
            let l = c.line()?;
            let f = fields(&c, l, "box", 5)?;
            let class_id: usize = num(&c, f[0], "class")?;
            let v: Vec<f64> = f[1..].iter().map(|s| num(&c, s, "coordinate")).collect::<Result<_>>()?;
            let bbox = BBox::raw(v[0], v[1], v[2], v[3]);
            if bbox.validate().is_err() {
                return Err(Error::Parse {
                    location: format!("scene {id}, line {}", c.line),
                    message: format!("invalid box {v:?}: min must be below max"),
                });
            }
            boxes.push(Annotation { class_id, bbox });
        }
        let l = c.line()?;
        let f = fields(&c, l, "raster", 1)?;
        let nbytes: usize = num(&c, f[0], "raster size")?;
        if nbytes != w * h * ch * 8 {
            return Err(c.err(format!("raster of {nbytes} bytes does not match {w}×{h}×{ch}")));
        }
        let raw = c.take(nbytes)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        if c.take(1)? != b"\n" {
            return Err(c.err("missing newline after raster"));
        }
        let image = Raster::new(w, h, ch, data).map_err(|e| c.err(e.to_string()))?;
        scenes.push(LabeledScene { id, image, boxes, domain, seed });
    }
    if c.pos != bytes.len() {
        return Err(c.err("trailing bytes after last scene"));
    }
    Ok(scenes)
}

pub fn save_dataset(scenes: &[LabeledScene], path: &Path) -> Result<()> {
    let bytes = encode_dataset(scenes)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<LabeledScene>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// Binary (P5) or ASCII (P2) graymap, scaled to `[0, 1]`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Raster> {
    let perr = |m: &str| Error::Parse {
        location: "pgm header".into(),
        message: m.into(),
    };
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token().ok_or_else(|| perr("empty file"))?;
    let mut dim = || -> Result<usize> {
        token()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| perr("bad dimension"))
    };
    let (w, h, maxval) = (dim()?, dim()?, dim()?);
    if maxval == 0 || maxval > 65535 || w == 0 || h == 0 {
        return Err(perr("bad maxval or extent"));
    }
    let scale = maxval as f64;
    let data: Vec<f64> = match magic.as_str() {
        "P5" => {
            let body = &bytes[(pos + 1).min(bytes.len())..];
            let bpp = if maxval < 256 { 1 } else { 2 };
            if body.len() < w * h * bpp {
                return Err(perr("pixel data truncated"));
            }
            (0..w * h)
                .map(|i| {
                    let v = if bpp == 1 {
                        body[i] as f64
                    } else {
                        u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as f64
                    };
                    v / scale
                })
                .collect()
        }
        "P2" => {
            let mut tok = token;
            (0..w * h)
                .map(|_| {
                    tok()
                        .and_then(|t| t.parse::<f64>().ok())
                        .map(|v| v / scale)
                        .ok_or_else(|| perr("pixel data truncated"))
                })
                .collect::<Result<_>>()?
        }
        _ => return Err(perr("not a P2/P5 graymap")),
    };
    Raster::new(w, h, 1, data)
}

/// 8-bit binary graymap.
pub fn encode_pgm(image: &Raster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for y in 0..image.height() {
        for x in 0..image.width() {
            out.push((image.get(x, y, 0).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Imports `*.pgm` images plus an `annotations.csv` sidecar with rows
/// `image,class,x_min,y_min,x_max,y_max` (image = file stem).
pub fn import_pgm_dir(dir: &Path, domain: Domain) -> Result<Vec<LabeledScene>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    names.sort();
    let ann_path = dir.join("annotations.csv");
    let ann = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut scenes = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let p = dir.join(name);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let image = parse_pgm(&bytes).map_err(|e| Error::Parse {
            location: p.display().to_string(),
            message: e.to_string(),
        })?;
        scenes.push(LabeledScene {
            id: i,
            image,
            boxes: Vec::new(),
            domain,
            seed: 0,
        });
    }
    for (ln, line) in ann.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("image,") {
            continue;
        }
        let loc = || format!("{}:{}", ann_path.display(), ln + 1);
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(Error::Parse { location: loc(), message: "expected 6 comma-separated fields".into() });
        }
        let idx = names
            .iter()
            .position(|n| n.trim_end_matches(".pgm") == f[0])
            .ok_or_else(|| Error::Parse { location: loc(), message: format!("unknown image '{}'", f[0]) })?;
        let class_id: usize = f[1]
            .parse()
            .map_err(|_| Error::Parse { location: loc(), message: format!("bad class '{}'", f[1]) })?;
        let v: Vec<f64> = f[2..]
            .iter()
            .map(|s| s.parse().map_err(|_| Error::Parse { location: loc(), message: format!("bad coordinate '{s}'") }))
            .collect::<Result<_>>()?;
        let bbox = BBox::new(v[0], v[1], v[2], v[3])
            .map_err(|e| Error::Parse { location: loc(), message: e.to_string() })?;
        scenes[idx].boxes.push(Annotation { class_id, bbox });
    }
    Ok(scenes)
}

/// Per-patch defect flags for one scene: a patch counts as defect when at
/// least `min_fraction` of its pixels belong to a defect.
pub fn patch_defect_labels(layers: &SceneLayers, image_size: usize, patch: usize, min_fraction: f64) -> Vec<bool> {
    let g = image_size / patch;
    let mut out = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let mut hit = 0;
            for py in 0..patch {
                for px in 0..patch {
                    hit += usize::from(layers.is_defect(gx * patch + px, gy * patch + py, image_size));
                }
            }
            out.push(hit as f64 >= min_fraction * (patch * patch) as f64);
        }
    }
    out
}

/// Per-patch flags from annotation boxes alone: a patch counts when at
/// least `min_fraction` of its area lies inside some box.
pub fn patch_labels_from_boxes(scene: &LabeledScene, patch: usize, min_fraction: f64) -> Vec<bool> {
    let size = scene.image.width();
    let g = size / patch;
    let cell = patch as f64 / size as f64;
    let mut out = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let p = BBox::raw(gx as f64 * cell, gy as f64 * cell, (gx + 1) as f64 * cell, (gy + 1) as f64 * cell);
            let covered = scene.boxes.iter().map(|a| a.bbox.intersection(&p)).fold(0.0, f64::max);
            out.push(covered >= min_fraction * p.area());
        }
    }
    out
}
