use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SCHEMA_VERSION};
use super::imageio::{load_image, save_image};
use super::seeds::{stage_seed, Stage};
use super::synth::{
    blend, content_image, hidden_memorability, hidden_scariness, hidden_scariness_score, style_image,
};
use crate::attribute::{write_labels, AttributeMode, LabelRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub seed: u64,
    pub image: Tensor,
}

/// All synthetic corpora of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpora {
    /// Codec training scenes.
    pub contents: Vec<Item>,
    /// The `K` style images.
    pub styles: Vec<Item>,
    /// Labelled images for the internal predictor.
    pub internal: Vec<Item>,
    /// Labelled images for the external predictor, disjoint from `internal`.
    pub external: Vec<Item>,
    pub validation: Vec<Item>,
    /// Content images to enhance; never used for training.
    pub test: Vec<Item>,
}

pub fn label(image: &Tensor, mode: AttributeMode) -> f64 {
    match mode {
        AttributeMode::Regression => hidden_memorability(image),
        AttributeMode::Binary => hidden_scariness(image),
    }
}

pub fn labels(items: &[Item], mode: AttributeMode) -> Vec<f64> {
    items.iter().map(|it| label(&it.image, mode)).collect()
}

/// The noise-free attribute the labels are drawn from: the same as the labels
/// in regression mode, the continuous hidden score in binary mode.
pub fn truth(items: &[Item], mode: AttributeMode) -> Vec<f64> {
    items
        .iter()
        .map(|it| match mode {
            AttributeMode::Regression => hidden_memorability(&it.image),
            AttributeMode::Binary => hidden_scariness_score(&it.image),
        })
        .collect()
}

pub fn images(items: &[Item]) -> Vec<Tensor> {
    items.iter().map(|it| it.image.clone()).collect()
}

/// Predictor training image: a scene, a style image or a pixel blend of both,
/// in equal proportions.
pub fn labeled_image(seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b): (u64, u64) = (rng.random(), rng.random());
    match rng.random_range(0..3) {
        0 => content_image(a, size),
        1 => style_image(b, size),
        _ => blend(&content_image(a, size), &style_image(b, size), rng.random()),
    }
}

fn make(prefix: &str, master: u64, stage: Stage, n: usize, f: impl Fn(u64) -> Tensor) -> Vec<Item> {
    (0..n)
        .map(|i| {
            let seed = stage_seed(master, stage, i as u64);
            Item {
                id: format!("{prefix}_{i:05}"),
                seed,
                image: f(seed),
            }
        })
        .collect()
}

/// Generates every corpus from the master seed.
pub fn generate_corpora(cfg: &ExperimentConfig) -> Result<Corpora> {
    cfg.validate()?;
    let (m, d) = (cfg.master_seed, &cfg.data);
    let s = d.image_size;
    let mut labeled = make("lab", m, Stage::LabeledImage, 2 * d.labeled_per_split, |x| {
        labeled_image(x, s)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(m, Stage::Split, 0));
    labeled.shuffle(&mut rng);
    let external = labeled.split_off(d.labeled_per_split);
    labeled.sort_by(|a, b| a.id.cmp(&b.id));
    let mut external = external;
    external.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Corpora {
        contents: make("content", m, Stage::ContentImage, d.contents, |x| content_image(x, s)),
        styles: make("style", m, Stage::StyleImage, d.styles, |x| style_image(x, s)),
        internal: labeled,
        external,
        validation: make("val", m, Stage::ValidationImage, d.validation, |x| labeled_image(x, s)),
        test: make("test", m, Stage::TestImage, d.test, |x| content_image(x, s)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub master_seed: u64,
    pub image_size: usize,
    pub items: Vec<ManifestEntry>,
}

const SPLITS: [&str; 6] = ["contents", "styles", "internal", "external", "validation", "test"];

impl Corpora {
    fn split(&self, name: &str) -> &[Item] {
        match name {
            "contents" => &self.contents,
            "styles" => &self.styles,
            "internal" => &self.internal,
            "external" => &self.external,
            "validation" => &self.validation,
            _ => &self.test,
        }
    }

    fn split_mut(&mut self, name: &str) -> &mut Vec<Item> {
        match name {
            "contents" => &mut self.contents,
            "styles" => &mut self.styles,
            "internal" => &mut self.internal,
            "external" => &mut self.external,
            "validation" => &mut self.validation,
            _ => &mut self.test,
        }
    }

    pub fn manifest(&self, cfg: &ExperimentConfig) -> Manifest {
        let items = SPLITS
            .iter()
            .flat_map(|&split| {
                self.split(split).iter().map(move |it| ManifestEntry {
                    id: it.id.clone(),
                    split: split.to_string(),
                    seed: it.seed,
                })
            })
            .collect();
        Manifest {
            schema_version: SCHEMA_VERSION,
            master_seed: cfg.master_seed,
            image_size: cfg.data.image_size,
            items,
        }
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Ingestion {
        item: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Refuses to touch a non-empty `dir` unless `overwrite` is set; in that case
/// the directory is cleared first.
pub(crate) fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    let occupied = dir
        .read_dir()
        .map(|mut it| it.next().is_some())
        .unwrap_or(false);
    if occupied {
        if !overwrite {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates the corpora and writes images, label files and the manifest
/// under the config's data directory.
pub fn gen_synthetic_data(cfg: &ExperimentConfig, overwrite: bool) -> Result<Corpora> {
    let corpora = generate_corpora(cfg)?;
    let dir = cfg.data_dir();
    prepare_dir(&dir, overwrite)?;
    for split in SPLITS {
        let sub = dir.join(split);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for it in corpora.split(split) {
            save_image(&sub.join(&it.id), &it.image)?;
        }
    }
    for mode in [AttributeMode::Regression, AttributeMode::Binary] {
        let name = match mode {
            AttributeMode::Regression => "labels_regression.csv",
            AttributeMode::Binary => "labels_binary.csv",
        };
        let records: Vec<LabelRecord> = ["internal", "external", "validation", "test"]
            .iter()
            .flat_map(|s| corpora.split(s))
            .map(|it| LabelRecord {
                id: it.id.clone(),
                value: label(&it.image, mode),
            })
            .collect();
        write_labels(&dir.join(name), &records)?;
    }
    write_json(&dir.join("manifest.json"), &corpora.manifest(cfg))?;
    Ok(corpora)
}

/// Reads corpora written by [`gen_synthetic_data`].
pub fn load_corpora(cfg: &ExperimentConfig) -> Result<Corpora> {
    let dir = cfg.data_dir();
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "data manifest schema {} is not supported",
            manifest.schema_version
        )));
    }
    let mut c = Corpora {
        contents: vec![],
        styles: vec![],
        internal: vec![],
        external: vec![],
        validation: vec![],
        test: vec![],
    };
    for e in manifest.items {
        let split = SPLITS
            .iter()
            .find(|s| **s == e.split)
            .ok_or_else(|| Error::Ingestion {
                item: e.id.clone(),
                reason: format!("unknown split {}", e.split),
            })?;
        let image = load_image(&dir.join(split).join(&e.id))?;
        c.split_mut(split).push(Item {
            id: e.id,
            seed: e.seed,
            image,
        });
    }
    Ok(c)
}
