//! Browser bindings: render a synthetic scene, corrupt it, and cluster its
//! patch embeddings under a frozen random backbone.

use wasm_bindgen::prelude::*;

use protoprompt::datagen::{generate_scene_layers, patch_defect_labels, DomainSpec, LabeledScene, SceneLayers};
use protoprompt::evalkit::{corrupt, Corruption, CorruptionSpec, MAX_SEVERITY};
use protoprompt::experiment::{backbone_for, ExperimentConfig};
use protoprompt::image::Raster;
use protoprompt::spem::{cluster_purity, fit_pca, kmeans};

fn js(e: protoprompt::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(image: &Raster) -> Vec<u8> {
    let c = image.channels();
    let mut out = Vec::with_capacity(image.width() * image.height() * 4);
    for px in image.data().chunks(c) {
        let v = |i: usize| (px[i.min(c - 1)].clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[v(0), v(1), v(2), 255]);
    }
    out
}

#[wasm_bindgen]
pub struct Scene {
    scene: LabeledScene,
    layers: SceneLayers,
    config: ExperimentConfig,
}

#[wasm_bindgen]
impl Scene {
    /// `shift_knob` 0 renders the source domain, 1 the far target.
    #[wasm_bindgen(constructor)]
    pub fn new(shift_knob: f64, defects: u32, seed: u32) -> Result<Scene, JsError> {
        let config = ExperimentConfig::default();
        let spec = DomainSpec::source(config.data.image_size).shifted(shift_knob).map_err(js)?;
        let (scene, layers) = generate_scene_layers(&spec, defects as usize, seed as u64).map_err(js)?;
        Ok(Scene { scene, layers, config })
    }

    pub fn size(&self) -> usize {
        self.scene.image.width()
    }

    pub fn patch_size(&self) -> usize {
        self.config.backbone.patch_size
    }

    pub fn rgba(&self) -> Vec<u8> {
        rgba(&self.scene.image)
    }

    /// `[class, x_min, y_min, x_max, y_max]` per box, unit coordinates.
    pub fn boxes(&self) -> Vec<f64> {
        self.scene
            .boxes
            .iter()
            .flat_map(|a| [a.class_id as f64, a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max])
            .collect()
    }

    /// `category` is one of noise, blur, weather, digital; severity 0..=5.
    pub fn corrupted_rgba(&self, category: &str, severity: u32, seed: u32) -> Result<Vec<u8>, JsError> {
        let category: Corruption = category.parse().map_err(js)?;
        if severity > MAX_SEVERITY {
            return Err(JsError::new(&format!("severity must be at most {MAX_SEVERITY}")));
        }
        let out = corrupt(&self.scene.image, CorruptionSpec { category, severity }, seed as u64).map_err(js)?;
        Ok(rgba(&out))
    }

    /// K-means over this scene's patch embeddings.
    pub fn cluster(&self, k: u32, seed: u32) -> Result<Clustering, JsError> {
        let backbone = backbone_for(&self.config, seed as u64).map_err(js)?;
        let x = backbone.patch_embeddings(&self.scene.image).map_err(js)?;
        let spem = &self.config.pretrain.spem;
        let z = fit_pca(&x, spem.reduced_dim).map_err(js)?.transform(&x).map_err(js)?;
        let km = kmeans(&z, k as usize, seed as u64, spem.n_init, spem.max_iter).map_err(js)?;
        let labels = patch_defect_labels(&self.layers, self.size(), self.patch_size(), 0.5);
        let purity = cluster_purity(&km.assignments, &labels, k as usize).map_err(js)?;
        Ok(Clustering {
            ids: km.assignments.iter().map(|&i| i as u32).collect(),
            defect_mask: labels.iter().map(|&l| l as u8).collect(),
            sizes: purity.iter().map(|&(s, _)| s as u32).collect(),
            purity: purity.into_iter().map(|(_, p)| p).collect(),
        })
    }
}

#[wasm_bindgen]
pub struct Clustering {
    ids: Vec<u32>,
    defect_mask: Vec<u8>,
    sizes: Vec<u32>,
    purity: Vec<f64>,
}

#[wasm_bindgen]
impl Clustering {
    /// Cluster id per patch, row-major.
    pub fn ids(&self) -> Vec<u32> {
        self.ids.clone()
    }

    /// 1 where at least half the patch is defect pixels.
    pub fn defect_mask(&self) -> Vec<u8> {
        self.defect_mask.clone()
    }

    /// Patch count of each cluster.
    pub fn sizes(&self) -> Vec<u32> {
        self.sizes.clone()
    }

    /// Defect share of each cluster, 0 when empty.
    pub fn purity(&self) -> Vec<f64> {
        self.purity.clone()
    }
}
