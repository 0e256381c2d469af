//! Multi-domain labeled image sets and their on-disk form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::domain::DomainSpec;
use super::render::{render, SHAPES};
use crate::error::{Error, Result};
use crate::numerics::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    /// `(n, 3, hw, hw)` in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Index into `domain_names` per sample.
    pub domain_of: Vec<usize>,
    pub domain_names: Vec<String>,
    pub class_count: usize,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domain_names
            .iter()
            .position(|d| d == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown domain {name:?}; dataset has {}",
                    self.domain_names.join(", ")
                ))
            })
    }

    pub fn indices_of(&self, domain: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.domain_of[i] == domain)
            .collect()
    }

    /// `(train, test)` sample ids for holding out one domain.
    pub fn leave_one_out(&self, held_out: &str) -> Result<(Vec<usize>, Vec<usize>)> {
        let d = self.domain_index(held_out)?;
        Ok((0..self.len()).partition(|&i| self.domain_of[i] != d))
    }

    pub fn images_of(&self, ids: &[usize]) -> Result<Tensor<f32>> {
        self.images.select_samples(ids)
    }

    pub fn labels_of(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn hw(&self) -> usize {
        self.images.shape().h
    }
}

/// Render `n_per_domain` samples per domain. Sample `i` of every domain has
/// label `i % class_count`. Clean renders depend on `base_seed`, the domain
/// seed and `i`; the corruption noise on the domain seed and `i`.
pub fn generate_dataset(
    base_seed: u64,
    domains: &[DomainSpec],
    n_per_domain: usize,
    class_count: usize,
    hw: usize,
) -> Result<DomainDataset> {
    if class_count < 2 || class_count > SHAPES.len() {
        return Err(Error::Config(format!(
            "class_count must be in 2..={}, got {class_count}",
            SHAPES.len()
        )));
    }
    if n_per_domain < class_count {
        return Err(Error::Config(format!(
            "n_per_domain {n_per_domain} is below class_count {class_count}"
        )));
    }
    if domains.is_empty() {
        return Err(Error::Config("no domains".into()));
    }
    for (i, d) in domains.iter().enumerate() {
        d.validate()?;
        if domains[..i].iter().any(|o| o.name == d.name) {
            return Err(Error::Config(format!("duplicate domain {:?}", d.name)));
        }
    }
    if hw < super::render::MIN_HW {
        return Err(Error::Config(format!(
            "image size {hw} too small to render shapes (minimum {})",
            super::render::MIN_HW
        )));
    }

    let per_domain: Vec<Vec<f32>> = domains
        .par_iter()
        .map(|d| -> Result<Vec<f32>> {
            let mut data = Vec::with_capacity(n_per_domain * 3 * hw * hw);
            for i in 0..n_per_domain {
                let seed = super::mix_seed(super::mix_seed(base_seed, d.seed), i as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut img = render(i % class_count, hw, &mut rng)?;
                d.apply(&mut img, i as u64);
                data.extend_from_slice(&img);
            }
            Ok(data)
        })
        .collect::<Result<_>>()?;

    let n = domains.len() * n_per_domain;
    let images = Tensor::new(Shape::new(n, 3, hw, hw), per_domain.concat())?;
    Ok(DomainDataset {
        images,
        labels: (0..n).map(|i| (i % n_per_domain) % class_count).collect(),
        domain_of: (0..n).map(|i| i / n_per_domain).collect(),
        domain_names: domains.iter().map(|d| d.name.clone()).collect(),
        class_count,
    })
}

pub const MANIFEST: &str = "manifest.csv";
pub const META: &str = "dataset.json";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    class_count: usize,
    hw: usize,
    domains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    specs: Option<Vec<DomainSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    label: usize,
    domain: String,
}

fn to_rgb8(img: &[f32], hw: usize) -> image::RgbImage {
    let plane = hw * hw;
    image::RgbImage::from_fn(hw as u32, hw as u32, |x, y| {
        let p = y as usize * hw + x as usize;
        image::Rgb([0, 1, 2].map(|c| (img[c * plane + p] * 255.0).round() as u8))
    })
}

/// Write `images/<domain>/<id>.ppm`, `manifest.csv` (path, label, domain)
/// and `dataset.json`. Images are 8-bit, which is lossless for datasets
/// from [`generate_dataset`].
pub fn export_dataset(
    data: &DomainDataset,
    dir: &Path,
    specs: Option<&[DomainSpec]>,
    base_seed: Option<u64>,
) -> Result<()> {
    let hw = data.hw();
    for name in &data.domain_names {
        fs::create_dir_all(dir.join("images").join(name))?;
    }
    let mut manifest = csv::Writer::from_path(dir.join(MANIFEST)).map_err(csv_err)?;
    for i in 0..data.len() {
        let domain = &data.domain_names[data.domain_of[i]];
        let rel = format!("images/{domain}/{i:06}.ppm");
        to_rgb8(data.images.sample(i), hw)
            .save_with_format(dir.join(&rel), image::ImageFormat::Pnm)
            .map_err(|e| Error::Config(format!("writing {rel}: {e}")))?;
        manifest
            .serialize(ManifestRow {
                path: rel,
                label: data.labels[i],
                domain: domain.clone(),
            })
            .map_err(csv_err)?;
    }
    manifest.flush()?;
    let meta = Meta {
        class_count: data.class_count,
        hw,
        domains: data.domain_names.clone(),
        specs: specs.map(<[_]>::to_vec),
        base_seed,
    };
    fs::write(dir.join(META), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("manifest: {e}"))
}

/// Read a directory written by [`export_dataset`]. Missing directory or
/// files are `Config` errors.
pub fn import_dataset(dir: &Path) -> Result<DomainDataset> {
    let meta_path = dir.join(META);
    let meta: Meta = serde_json::from_str(
        &fs::read_to_string(&meta_path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", meta_path.display())))?,
    )?;
    let hw = meta.hw;
    let mut reader = csv::Reader::from_path(dir.join(MANIFEST)).map_err(csv_err)?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domain_of = Vec::new();
    let index: BTreeMap<&str, usize> = meta
        .domains
        .iter()
        .enumerate()
        .map(|(i, d)| (d.as_str(), i))
        .collect();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(csv_err)?;
        let d = *index.get(row.domain.as_str()).ok_or_else(|| {
            Error::Config(format!("manifest domain {:?} not in {META}", row.domain))
        })?;
        if row.label >= meta.class_count {
            return Err(Error::Config(format!("label {} out of range", row.label)));
        }
        let img = image::open(dir.join(&row.path))
            .map_err(|e| Error::Config(format!("reading {}: {e}", row.path)))?
            .to_rgb8();
        if img.width() as usize != hw || img.height() as usize != hw {
            return Err(Error::Config(format!("{} is not {hw}x{hw}", row.path)));
        }
        for c in 0..3 {
            data.extend(img.pixels().map(|p| p[c] as f32 / 255.0));
        }
        labels.push(row.label);
        domain_of.push(d);
    }
    if labels.is_empty() {
        return Err(Error::Config(format!("{} lists no images", MANIFEST)));
    }
    Ok(DomainDataset {
        images: Tensor::new(Shape::new(labels.len(), 3, hw, hw), data)?,
        labels,
        domain_of,
        domain_names: meta.domains,
        class_count: meta.class_count,
    })
}
