//! Identity-preservation and text-alignment metrics over a fixed prompt suite.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{sample_latent, DiffusionBackend, SamplerConfig};
use crate::concept::ConceptSpec;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{cosine_similarity, Tensor};

pub const PLACEHOLDER_SLOT: &str = "[V]";
pub const CATEGORY_SLOT: &str = "[category]";

const SUITE: [&str; 24] = [
    "a photo of a [V] [category]",
    "a photo of a [V] [category] in Times Square",
    "a photo of two [V] [category] on a table",
    "a [V] [category] in the jungle",
    "a [V] [category] on a stone wall in the countryside",
    "a [V] [category] on a brick pathway in a garden",
    "a [V] [category] on a pile of fallen leaves in a forest",
    "a [V] [category] at a picnic spot with a checkered blanket",
    "a [V] [category] nestled among rocks",
    "a [V] [category] inside a basket",
    "a [V] [category] inside a metal cage",
    "a [V] [category] drenched in the rainy streets",
    "a [V] [category] in a grassy park with a sunglasses",
    "a [V] [category] floats on the water",
    "a [V] [category] covered by snow",
    "a red [V] [category] wearing bowtie",
    "a purple [V] [category]",
    "a black [V] [category]",
    "a [V] [category] latte art",
    "pencil drawing of a [V] [category]",
    "manga drawing of a [V] [category]",
    "a watercolor painting of a [V] [category]",
    "vector art of a [V] [category]",
    "a painting of a [V] [category] in the style of Monet",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSuite {
    pub templates: Vec<String>,
}

impl PromptSuite {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::InvalidConfig("prompt suite is empty".into()));
        }
        if let Some(bad) = templates.iter().find(|t| !(t.contains(PLACEHOLDER_SLOT) && t.contains(CATEGORY_SLOT))) {
            return Err(Error::InvalidConfig(format!("prompt {bad:?} lacks a {PLACEHOLDER_SLOT} or {CATEGORY_SLOT} slot")));
        }
        Ok(Self { templates })
    }

    /// One template per line; blank lines and `#` comments are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Hex SHA-256 of the templates joined by newlines.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.templates.join("\n").as_bytes()))
    }
}

/// The 24 evaluation prompts, in order.
pub fn load_prompt_suite() -> PromptSuite {
    PromptSuite { templates: SUITE.iter().map(|s| s.to_string()).collect() }
}

/// Fills both slots; this is the prompt images are generated from.
pub fn render_prompt(template: &str, placeholder: &str, category: &str) -> String {
    template.replace(PLACEHOLDER_SLOT, placeholder).replace(CATEGORY_SLOT, category)
}

/// The prompt as given to the text embedder: the placeholder gives way to the category word.
pub fn embedding_text(template: &str, category: &str) -> String {
    template
        .replace(&format!("{PLACEHOLDER_SLOT} {CATEGORY_SLOT}"), category)
        .replace(PLACEHOLDER_SLOT, category)
        .replace(CATEGORY_SLOT, category)
}

/// A joint image/text embedder producing unit-norm vectors.
pub trait Embedder {
    /// Recorded in reports so scores from different embedders are never mixed.
    fn id(&self) -> String;
    /// `image` is `[3, H, W]` in [-1, 1].
    fn embed_image(&self, image: &Tensor) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Seeded random projections: images are average-pooled to an 8×8 grid per channel,
/// text is a sum of per-word random vectors. Deterministic, and meaningful only as
/// plumbing for the toy backend.
#[derive(Clone, Debug)]
pub struct ProjectionEmbedder {
    seed: u64,
    dim: usize,
    grid: usize,
    image_proj: Vec<f64>,
}

impl ProjectionEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let grid = 8;
        let inputs = 3 * grid * grid;
        let mut rng = rng_for(seed, "embedder-image");
        let image_proj = crate::backend::toy::gaussian(&[dim, inputs], &mut rng).into_data();
        Self { seed, dim, grid, image_proj }
    }

    fn pooled(&self, image: &Tensor) -> Result<Vec<f64>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 || shape[1] < self.grid || shape[2] < self.grid {
            return Err(Error::ShapeMismatch { left: shape.to_vec(), right: vec![3, self.grid, self.grid] });
        }
        let (h, w, g) = (shape[1], shape[2], self.grid);
        let mut out = vec![0.0; 3 * g * g];
        let mut counts = vec![0usize; g * g];
        for y in 0..h {
            for x in 0..w {
                counts[(y * g / h) * g + x * g / w] += 1;
            }
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let cell = (y * g / h) * g + x * g / w;
                    out[c * g * g + cell] += image.data()[c * h * w + y * w + x];
                }
            }
            for cell in 0..g * g {
                out[c * g * g + cell] /= counts[cell] as f64;
            }
        }
        Ok(out)
    }
}

impl Default for ProjectionEmbedder {
    fn default() -> Self {
        Self::new(0, 32)
    }
}

impl Embedder for ProjectionEmbedder {
    fn id(&self) -> String {
        format!("projection-{}x{}-seed{}", self.dim, self.grid, self.seed)
    }

    fn embed_image(&self, image: &Tensor) -> Result<Vec<f64>> {
        let pooled = self.pooled(image)?;
        // Offset keeps a flat gray image off the zero vector.
        let v = (0..self.dim)
            .map(|r| {
                let row = &self.image_proj[r * pooled.len()..(r + 1) * pooled.len()];
                row.iter().zip(&pooled).map(|(a, b)| a * (b + 1.0)).sum()
            })
            .collect();
        normalized(v)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for word in text.split_whitespace() {
            let label = format!("embedder-word-{}", word.to_lowercase());
            let mut rng = rng_for(self.seed, &label);
            let w = crate::backend::toy::gaussian(&[self.dim], &mut rng);
            v.iter_mut().zip(w.data()).for_each(|(a, b)| *a += b);
        }
        normalized(v)
    }
}

fn empty_set(which: &str) -> Error {
    Error::EmptyImageSet(PathBuf::from(format!("<{which} images>")))
}

/// Mean cosine similarity over all (generated, reference) pairs.
pub fn identity_score(generated: &[Tensor], reference: &[Tensor], embedder: &dyn Embedder) -> Result<f64> {
    if generated.is_empty() {
        return Err(empty_set("generated"));
    }
    if reference.is_empty() {
        return Err(empty_set("reference"));
    }
    let gen: Vec<Vec<f64>> = generated.iter().map(|i| embedder.embed_image(i)).collect::<Result<_>>()?;
    let refs: Vec<Vec<f64>> = reference.iter().map(|i| embedder.embed_image(i)).collect::<Result<_>>()?;
    let mut total = 0.0;
    for g in &gen {
        for r in &refs {
            total += cosine_similarity(g, r)?;
        }
    }
    Ok(total / (gen.len() * refs.len()) as f64)
}

/// Mean cosine similarity between each image and `text` (already in embedding form).
pub fn text_alignment_score(generated: &[Tensor], text: &str, embedder: &dyn Embedder) -> Result<f64> {
    if generated.is_empty() {
        return Err(empty_set("generated"));
    }
    let t = embedder.embed_text(text)?;
    let mut total = 0.0;
    for image in generated {
        total += cosine_similarity(&embedder.embed_image(image)?, &t)?;
    }
    Ok(total / generated.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptMetrics {
    pub prompt: String,
    pub identity: f64,
    pub text_alignment: f64,
    pub n_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub concept_id: String,
    pub suite_hash: String,
    pub embedder: String,
    pub identity: f64,
    pub text_alignment: f64,
    pub per_prompt: Vec<PromptMetrics>,
}

impl MetricReport {
    /// Aggregates rows by image-count-weighted mean.
    pub fn from_rows(concept_id: &str, suite: &PromptSuite, embedder: &str, per_prompt: Vec<PromptMetrics>) -> Self {
        let n: usize = per_prompt.iter().map(|r| r.n_images).sum();
        let weighted = |f: fn(&PromptMetrics) -> f64| {
            per_prompt.iter().map(|r| f(r) * r.n_images as f64).sum::<f64>() / n.max(1) as f64
        };
        Self {
            concept_id: concept_id.to_string(),
            suite_hash: suite.hash(),
            embedder: embedder.to_string(),
            identity: weighted(|r| r.identity),
            text_alignment: weighted(|r| r.text_alignment),
            per_prompt,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("prompt,identity,text_alignment,n_images\n");
        for row in &self.per_prompt {
            let prompt = row.prompt.replace('"', "\"\"");
            let _ = writeln!(out, "\"{prompt}\",{},{},{}", row.identity, row.text_alignment, row.n_images);
        }
        out
    }

    pub fn save(&self, json_path: &Path, csv_path: Option<&Path>) -> Result<()> {
        std::fs::write(json_path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(json_path, e))?;
        if let Some(csv) = csv_path {
            std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    pub images_per_prompt: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

/// Generates `images_per_prompt` images for every suite prompt and scores them
/// against `reference` (preprocessed concept images).
pub fn evaluate(
    backend: &dyn DiffusionBackend,
    concept: &ConceptSpec,
    suite: &PromptSuite,
    reference: &[Tensor],
    embedder: &dyn Embedder,
    config: EvalConfig,
) -> Result<MetricReport> {
    if config.images_per_prompt == 0 {
        return Err(Error::InvalidConfig("evaluation.images_per_prompt must be >= 1".into()));
    }
    let uncond = backend.encode_text(&backend.tokenize(""))?;
    let mut rows = Vec::with_capacity(suite.len());
    for (i, template) in suite.templates.iter().enumerate() {
        let prompt = render_prompt(template, &concept.placeholder, &concept.super_category);
        let cond = backend.encode_text(&backend.tokenize(&prompt))?;
        let mut rng = rng_for(derive_seed(config.seed, "evaluate"), &format!("prompt-{i}"));
        let images = (0..config.images_per_prompt)
            .map(|_| backend.decode_latent(&sample_latent(backend, &cond, &uncond, config.sampler, &mut rng)?))
            .collect::<Result<Vec<_>>>()?;
        rows.push(PromptMetrics {
            identity: identity_score(&images, reference, embedder)?,
            text_alignment: text_alignment_score(&images, &embedding_text(template, &concept.super_category), embedder)?,
            n_images: images.len(),
            prompt,
        });
    }
    Ok(MetricReport::from_rows(&concept.concept_id, suite, &embedder.id(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Maps images to a vector chosen by their first pixel value; text to a fixed vector.
    struct Lookup {
        table: Vec<(f64, Vec<f64>)>,
        text: Vec<f64>,
    }

    impl Embedder for Lookup {
        fn id(&self) -> String {
            "lookup".into()
        }

        fn embed_image(&self, image: &Tensor) -> Result<Vec<f64>> {
            let key = image.data()[0];
            Ok(self.table.iter().find(|(k, _)| *k == key).expect("known image").1.clone())
        }

        fn embed_text(&self, _: &str) -> Result<Vec<f64>> {
            Ok(self.text.clone())
        }
    }

    fn img(key: f64) -> Tensor {
        Tensor::full(&[3, 8, 8], key)
    }

    #[test]
    fn suite_has_24_slotted_prompts() {
        let suite = load_prompt_suite();
        assert_eq!(suite.len(), 24);
        assert_eq!(suite.templates[0], "a photo of a [V] [category]");
        assert_eq!(suite.templates[23], "a painting of a [V] [category] in the style of Monet");
        assert!(PromptSuite::new(suite.templates.clone()).is_ok());
    }

    #[test]
    fn embedding_text_drops_placeholder() {
        assert_eq!(embedding_text("a red [V] [category] wearing bowtie", "toy"), "a red toy wearing bowtie");
        assert_eq!(render_prompt("a red [V] [category] wearing bowtie", "[V]", "toy"), "a red [V] toy wearing bowtie");
    }

    #[test]
    fn orthogonal_and_mixed_sets() {
        let e = Lookup { table: vec![(0.1, vec![1.0, 0.0]), (0.2, vec![0.0, 1.0])], text: vec![1.0, 0.0] };
        assert_eq!(identity_score(&[img(0.1)], &[img(0.2)], &e).unwrap(), 0.0);
        assert_eq!(identity_score(&[img(0.1)], &[img(0.1)], &e).unwrap(), 1.0);
        assert_eq!(text_alignment_score(&[img(0.2)], "x", &e).unwrap(), 0.0);
        assert_eq!(text_alignment_score(&[img(0.1), img(0.2)], "x", &e).unwrap(), 0.5);
        assert!(matches!(identity_score(&[], &[img(0.1)], &e), Err(Error::EmptyImageSet(_))));
        assert!(matches!(text_alignment_score(&[], "x", &e), Err(Error::EmptyImageSet(_))));
    }

    #[test]
    fn projection_embedder_is_unit_norm_and_deterministic() {
        let e = ProjectionEmbedder::default();
        let a = e.embed_image(&img(0.3)).unwrap();
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a, ProjectionEmbedder::default().embed_image(&img(0.3)).unwrap());
        let t = e.embed_text("a photo of a toy").unwrap();
        assert!((t.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t, e.embed_text("A photo of a TOY").unwrap());
    }

    #[test]
    fn report_aggregates_by_image_count() {
        let rows = vec![
            PromptMetrics { prompt: "p1".into(), identity: 1.0, text_alignment: 0.0, n_images: 1 },
            PromptMetrics { prompt: "p2".into(), identity: 0.0, text_alignment: 1.0, n_images: 3 },
        ];
        let report = MetricReport::from_rows("c", &load_prompt_suite(), "lookup", rows);
        assert_eq!(report.identity, 0.25);
        assert_eq!(report.text_alignment, 0.75);
        assert!(report.to_csv().starts_with("prompt,identity"));
        assert_eq!(report.to_csv().lines().count(), 3);
    }
}
