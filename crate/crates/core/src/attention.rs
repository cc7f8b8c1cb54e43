//! Cross-attention capture, pooled statistics and DAAM-style heatmaps.
//!
//! Maps are post-softmax probabilities over text-token positions, averaged
//! over heads and over the batch items of a forward pass. A record stores
//! its values location-major: `values[(y * width + x) * num_tokens + token]`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DUMP_FORMAT_VERSION: u32 = 1;

/// Which prompt token a map refers to.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenRole {
    /// The learnable placeholder token.
    Concept,
    /// The super-category token the placeholder is regularized towards.
    Category,
    /// Any prompt position, addressed directly.
    Position(usize),
}

impl fmt::Display for TokenRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenRole::Concept => f.write_str("V"),
            TokenRole::Category => f.write_str("category"),
            TokenRole::Position(p) => write!(f, "pos{p}"),
        }
    }
}

impl FromStr for TokenRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "V" => Ok(TokenRole::Concept),
            "category" => Ok(TokenRole::Category),
            other => other
                .strip_prefix("pos")
                .and_then(|n| n.parse().ok())
                .map(TokenRole::Position)
                .ok_or_else(|| Error::UnknownTokenRole(other.to_string())),
        }
    }
}

/// Spatial extent of one cross-attention layer's map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub layer_id: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer_id: usize,
    pub height: usize,
    pub width: usize,
    pub num_tokens: usize,
    pub values: Vec<f64>,
}

impl AttentionRecord {
    pub fn new(layer_id: usize, height: usize, width: usize, num_tokens: usize, values: Vec<f64>) -> Result<Self> {
        if height * width == 0 || num_tokens == 0 {
            return Err(Error::ShapeMismatch { left: vec![height, width, num_tokens], right: vec![] });
        }
        if values.len() != height * width * num_tokens {
            return Err(Error::DimensionMismatch { left: height * width * num_tokens, right: values.len() });
        }
        Ok(Self { layer_id, height, width, num_tokens, values })
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    /// The spatial map of one token position, row-major `height × width`.
    pub fn token_map(&self, token: usize) -> Vec<f64> {
        self.values.iter().skip(token).step_by(self.num_tokens).copied().collect()
    }

    /// Largest deviation of a per-location token sum from one.
    pub fn max_normalization_error(&self) -> f64 {
        self.values
            .chunks(self.num_tokens)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-layer, per-token maps plus the role → position index used by the regularizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMapSet {
    pub layers: Vec<AttentionRecord>,
    pub token_index: Vec<(TokenRole, usize)>,
    /// Surface strings of the prompt tokens, when known.
    pub tokens: Vec<String>,
}

impl AttentionMapSet {
    pub fn position_of(&self, role: &TokenRole) -> Option<usize> {
        if let TokenRole::Position(p) = role {
            let in_range = self.layers.first().is_some_and(|l| *p < l.num_tokens);
            return in_range.then_some(*p);
        }
        self.token_index.iter().find(|(r, _)| r == role).map(|(_, p)| *p)
    }

    fn require(&self, role: &TokenRole) -> Result<usize> {
        self.position_of(role).ok_or_else(|| Error::UnknownTokenRole(role.to_string()))
    }

    /// Every value in the set lies in [0, 1] and each location's token sum is 1 within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        self.layers.iter().all(|l| {
            l.values.iter().all(|v| (0.0..=1.0).contains(v)) && l.max_normalization_error() <= tol
        })
    }
}

/// How per-layer value collections are combined into one population.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Concatenate every value of every layer; larger maps weigh more.
    #[default]
    Concat,
    /// Average the per-layer statistics with equal layer weight.
    PerLayerMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledStats {
    pub mean: f64,
    pub variance: f64,
}

/// Mean and population variance of one token's values pooled across all layers.
pub fn pooled_stats(mapset: &AttentionMapSet, role: &TokenRole) -> Result<PooledStats> {
    pooled_stats_with(mapset, role, Pooling::Concat)
}

pub fn pooled_stats_with(mapset: &AttentionMapSet, role: &TokenRole, pooling: Pooling) -> Result<PooledStats> {
    let token = mapset.require(role)?;
    if mapset.layers.is_empty() {
        return Err(Error::EmptySession);
    }
    let per_layer: Vec<(f64, f64, usize)> = mapset
        .layers
        .iter()
        .map(|layer| {
            let n = layer.locations();
            let mean = layer.values.iter().skip(token).step_by(layer.num_tokens).sum::<f64>() / n as f64;
            (mean, 0.0, n)
        })
        .collect();
    match pooling {
        Pooling::Concat => {
            let total: usize = per_layer.iter().map(|(_, _, n)| n).sum();
            let mean = per_layer.iter().map(|(m, _, n)| m * *n as f64).sum::<f64>() / total as f64;
            let sq: f64 = mapset
                .layers
                .iter()
                .flat_map(|l| l.values.iter().skip(token).step_by(l.num_tokens))
                .map(|v| (v - mean) * (v - mean))
                .sum();
            Ok(PooledStats { mean, variance: sq / total as f64 })
        }
        Pooling::PerLayerMean => {
            let count = mapset.layers.len() as f64;
            let mut mean = 0.0;
            let mut variance = 0.0;
            for (layer, (m, _, n)) in mapset.layers.iter().zip(&per_layer) {
                let sq: f64 = layer.values.iter().skip(token).step_by(layer.num_tokens).map(|v| (v - m) * (v - m)).sum();
                mean += m / count;
                variance += sq / *n as f64 / count;
            }
            Ok(PooledStats { mean, variance })
        }
    }
}

/// Upsample-sum-normalize attribution image for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn to_gray8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.values[y as usize * self.width + x as usize];
            image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize(src: &[f64], height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let sample = |y: isize, x: isize| {
        let y = y.clamp(0, height as isize - 1) as usize;
        let x = x.clamp(0, width as isize - 1) as usize;
        src[y * width + x]
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * height as f64 / out_h as f64 - 0.5).max(0.0);
        let y0 = fy.floor();
        let wy = fy - y0;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * width as f64 / out_w as f64 - 0.5).max(0.0);
            let x0 = fx.floor();
            let wx = fx - x0;
            let (y0, x0) = (y0 as isize, x0 as isize);
            let top = sample(y0, x0) * (1.0 - wx) + sample(y0, x0 + 1) * wx;
            let bottom = sample(y0 + 1, x0) * (1.0 - wx) + sample(y0 + 1, x0 + 1) * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

pub fn aggregate_heatmap(mapset: &AttentionMapSet, role: &TokenRole, out_resolution: usize) -> Result<Heatmap> {
    let token = mapset.require(role)?;
    let max_res = mapset.layers.iter().map(|l| l.height.max(l.width)).max().unwrap_or(0);
    if out_resolution < max_res || out_resolution == 0 {
        return Err(Error::InvalidConfig(format!(
            "heatmap resolution {out_resolution} is below the largest layer resolution {max_res}"
        )));
    }
    let mut sum = vec![0.0; out_resolution * out_resolution];
    for layer in &mapset.layers {
        let up = bilinear_resize(&layer.token_map(token), layer.height, layer.width, out_resolution, out_resolution);
        sum.iter_mut().zip(up).for_each(|(s, u)| *s += u);
    }
    let lo = sum.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo { sum.iter().map(|v| (v - lo) / (hi - lo)).collect() } else { vec![0.0; sum.len()] };
    Ok(Heatmap { height: out_resolution, width: out_resolution, values })
}

// ---------------------------------------------------------------------------
// Capture

#[derive(Default)]
struct SessionBuffer {
    prompt_tokens: Vec<usize>,
    sums: Vec<AttentionRecord>,
    passes: usize,
    keep_passes: bool,
    per_pass: Vec<Vec<AttentionRecord>>,
}

/// The backend-side end of the capture mechanism. Backends call
/// [`AttentionTap::record`] once per forward pass with head- and batch-averaged maps.
#[derive(Clone, Default)]
pub struct AttentionTap {
    active: Arc<Mutex<Option<Arc<Mutex<SessionBuffer>>>>>,
}

impl std::fmt::Debug for AttentionTap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AttentionTap").field("active", &self.is_active()).finish()
    }
}

impl AttentionTap {
    pub fn is_active(&self) -> bool {
        self.active.lock().expect("tap lock poisoned").is_some()
    }

    /// Records a pass if a session is active and `tokens` is the session's prompt.
    pub fn record(&self, tokens: &[usize], layers: impl FnOnce() -> Vec<AttentionRecord>) {
        let guard = self.active.lock().expect("tap lock poisoned");
        let Some(buffer) = guard.as_ref() else { return };
        let mut buf = buffer.lock().expect("session lock poisoned");
        if buf.prompt_tokens != tokens {
            return;
        }
        let layers = layers();
        if buf.sums.is_empty() {
            buf.sums = layers.iter().map(|l| AttentionRecord { values: vec![0.0; l.values.len()], ..l.clone() }).collect();
        }
        for (acc, layer) in buf.sums.iter_mut().zip(&layers) {
            acc.values.iter_mut().zip(&layer.values).for_each(|(a, v)| *a += v);
        }
        buf.passes += 1;
        if buf.keep_passes {
            buf.per_pass.push(layers);
        }
    }
}

/// An in-progress (or finished) recording of attention maps for one prompt.
pub struct CaptureSession {
    tap: AttentionTap,
    buffer: Arc<Mutex<SessionBuffer>>,
    token_index: Vec<(TokenRole, usize)>,
    tokens: Vec<String>,
}

/// Starts recording forward passes that condition on exactly `prompt_tokens`.
pub fn begin_capture(
    tap: &AttentionTap,
    prompt_tokens: &[usize],
    token_index: Vec<(TokenRole, usize)>,
    tokens: Vec<String>,
) -> Result<CaptureSession> {
    begin_capture_with(tap, prompt_tokens, token_index, tokens, false)
}

/// Like [`begin_capture`], optionally retaining every individual pass for per-step export.
pub fn begin_capture_with(
    tap: &AttentionTap,
    prompt_tokens: &[usize],
    token_index: Vec<(TokenRole, usize)>,
    tokens: Vec<String>,
    keep_passes: bool,
) -> Result<CaptureSession> {
    let mut active = tap.active.lock().expect("tap lock poisoned");
    if active.is_some() {
        return Err(Error::SessionAlreadyActive);
    }
    let buffer = Arc::new(Mutex::new(SessionBuffer {
        prompt_tokens: prompt_tokens.to_vec(),
        keep_passes,
        ..Default::default()
    }));
    *active = Some(buffer.clone());
    Ok(CaptureSession { tap: tap.clone(), buffer, token_index, tokens })
}

impl CaptureSession {
    /// Stops recording. Collected maps stay available.
    pub fn end(&self) {
        let mut active = self.tap.active.lock().expect("tap lock poisoned");
        if active.as_ref().is_some_and(|b| Arc::ptr_eq(b, &self.buffer)) {
            *active = None;
        }
    }

    pub fn passes(&self) -> usize {
        self.buffer.lock().expect("session lock poisoned").passes
    }

    /// Mean over all recorded passes.
    pub fn collect_maps(&self) -> Result<AttentionMapSet> {
        let buf = self.buffer.lock().expect("session lock poisoned");
        if buf.passes == 0 {
            return Err(Error::EmptySession);
        }
        let scale = 1.0 / buf.passes as f64;
        let layers = buf
            .sums
            .iter()
            .map(|l| AttentionRecord { values: l.values.iter().map(|v| v * scale).collect(), ..l.clone() })
            .collect();
        Ok(AttentionMapSet { layers, token_index: self.token_index.clone(), tokens: self.tokens.clone() })
    }

    /// One map set per recorded pass; empty unless the session keeps passes.
    pub fn per_pass_maps(&self) -> Vec<AttentionMapSet> {
        let buf = self.buffer.lock().expect("session lock poisoned");
        buf.per_pass
            .iter()
            .map(|layers| AttentionMapSet {
                layers: layers.clone(),
                token_index: self.token_index.clone(),
                tokens: self.tokens.clone(),
            })
            .collect()
    }
}

impl Drop for CaptureSession {
    fn drop(&mut self) {
        self.end();
    }
}

/// Free-function form of [`CaptureSession::collect_maps`].
pub fn collect_maps(session: &CaptureSession) -> Result<AttentionMapSet> {
    session.collect_maps()
}

// ---------------------------------------------------------------------------
// Dump / reload

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpLayer {
    pub layer_id: usize,
    pub height: usize,
    pub width: usize,
    pub num_tokens: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format_version: u32,
    pub layers: Vec<DumpLayer>,
    pub shapes: Vec<[usize; 3]>,
    pub token_roles: Vec<(String, usize)>,
    pub tokens: Vec<String>,
    pub heatmaps: Vec<String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn role_file_stem(role: &TokenRole, position: usize, tokens: &[String]) -> String {
    let word: String = tokens
        .get(position)
        .map(|w| w.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect())
        .unwrap_or_default();
    if word.is_empty() {
        format!("heatmap_{role}")
    } else {
        format!("heatmap_{role}_{word}")
    }
}

/// Writes a manifest, one `f32` little-endian blob per layer, and one grayscale
/// PNG heatmap per token role. Returns the manifest path.
pub fn dump_maps(mapset: &AttentionMapSet, directory: &Path) -> Result<PathBuf> {
    fs::create_dir_all(directory).map_err(|e| Error::io(directory, e))?;
    let mut layers = Vec::with_capacity(mapset.layers.len());
    for record in &mapset.layers {
        let file = format!("layer_{:02}.f32", record.layer_id);
        let bytes: Vec<u8> = record.values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        let path = directory.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        layers.push(DumpLayer {
            layer_id: record.layer_id,
            height: record.height,
            width: record.width,
            num_tokens: record.num_tokens,
            file,
        });
    }
    let out_resolution = mapset.layers.iter().map(|l| l.height.max(l.width)).max().unwrap_or(1);
    let mut heatmaps = Vec::with_capacity(mapset.token_index.len());
    for (role, position) in &mapset.token_index {
        let heatmap = aggregate_heatmap(mapset, role, out_resolution)?;
        let name = format!("{}.png", role_file_stem(role, *position, &mapset.tokens));
        let path = directory.join(&name);
        heatmap.to_gray8().save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        heatmaps.push(name);
    }
    let manifest = DumpManifest {
        format_version: DUMP_FORMAT_VERSION,
        shapes: mapset.layers.iter().map(|l| [l.height, l.width, l.num_tokens]).collect(),
        layers,
        token_roles: mapset.token_index.iter().map(|(r, p)| (r.to_string(), *p)).collect(),
        tokens: mapset.tokens.clone(),
        heatmaps,
    };
    let path = directory.join(MANIFEST_NAME);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a dump written by [`dump_maps`]. Values come back at `f32` precision.
pub fn load_maps(manifest_path: &Path) -> Result<AttentionMapSet> {
    let text = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DumpManifest = serde_json::from_slice(&text)?;
    if manifest.format_version != DUMP_FORMAT_VERSION {
        return Err(Error::MalformedArtifact {
            path: manifest_path.to_path_buf(),
            reason: format!("unsupported format_version {}", manifest.format_version),
        });
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for layer in &manifest.layers {
        let path = dir.join(&layer.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect();
        layers.push(AttentionRecord::new(layer.layer_id, layer.height, layer.width, layer.num_tokens, values)?);
    }
    let token_index = manifest
        .token_roles
        .iter()
        .map(|(r, p)| Ok((r.parse()?, *p)))
        .collect::<Result<_>>()?;
    Ok(AttentionMapSet { layers, token_index, tokens: manifest.tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(values: &[f64], h: usize, w: usize, tokens: usize, layer_id: usize) -> AttentionRecord {
        AttentionRecord::new(layer_id, h, w, tokens, values.to_vec()).unwrap()
    }

    fn set(layers: Vec<AttentionRecord>) -> AttentionMapSet {
        AttentionMapSet {
            layers,
            token_index: vec![(TokenRole::Concept, 0), (TokenRole::Category, 1)],
            tokens: vec!["[V]".into(), "toy".into()],
        }
    }

    #[test]
    fn constant_field_has_zero_variance() {
        let rec = single(&[0.5; 8], 2, 2, 2, 0);
        let stats = pooled_stats(&set(vec![rec]), &TokenRole::Concept).unwrap();
        assert_eq!(stats, PooledStats { mean: 0.5, variance: 0.0 });
    }

    #[test]
    fn two_unit_maps_zero_and_one() {
        // V is token 0; values 0 in layer 0 and 1 in layer 1.
        let a = single(&[0.0, 1.0], 1, 1, 2, 0);
        let b = single(&[1.0, 0.0], 1, 1, 2, 1);
        let stats = pooled_stats(&set(vec![a, b]), &TokenRole::Concept).unwrap();
        assert_eq!(stats.mean, 0.5);
        assert_eq!(stats.variance, 0.25);
    }

    #[test]
    fn per_layer_mean_pooling_weighs_layers_equally() {
        // layer 0: 1x1 value 1.0; layer 1: 2x1 values {0, 0}
        let a = single(&[1.0, 0.0], 1, 1, 2, 0);
        let b = single(&[0.0, 1.0, 0.0, 1.0], 2, 1, 2, 1);
        let ms = set(vec![a, b]);
        let concat = pooled_stats_with(&ms, &TokenRole::Concept, Pooling::Concat).unwrap();
        let per_layer = pooled_stats_with(&ms, &TokenRole::Concept, Pooling::PerLayerMean).unwrap();
        assert!((concat.mean - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(per_layer.mean, 0.5);
        assert_eq!(per_layer.variance, 0.0);
    }

    #[test]
    fn unknown_role_is_reported() {
        let ms = AttentionMapSet { token_index: vec![], ..set(vec![single(&[1.0], 1, 1, 1, 0)]) };
        assert!(matches!(pooled_stats(&ms, &TokenRole::Category), Err(Error::UnknownTokenRole(_))));
        assert!(matches!(
            aggregate_heatmap(&ms, &TokenRole::Concept, 4),
            Err(Error::UnknownTokenRole(_))
        ));
        assert!(pooled_stats(&ms, &TokenRole::Position(0)).is_ok());
        assert!(pooled_stats(&ms, &TokenRole::Position(1)).is_err());
    }

    #[test]
    fn role_strings_round_trip() {
        for role in [TokenRole::Concept, TokenRole::Category, TokenRole::Position(7)] {
            assert_eq!(role.to_string().parse::<TokenRole>().unwrap(), role);
        }
        assert!("nonsense".parse::<TokenRole>().is_err());
    }

    #[test]
    fn constant_layers_give_zero_heatmap() {
        let a = single(&[0.5; 8], 2, 2, 2, 0);
        let b = single(&[0.5; 2], 1, 1, 2, 1);
        let hm = aggregate_heatmap(&set(vec![a, b]), &TokenRole::Concept, 4).unwrap();
        assert!(hm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_upsample_is_min_max_normalization() {
        let map = [0.1, 0.3, 0.2, 0.5];
        let values: Vec<f64> = map.iter().flat_map(|&v| [v, 1.0 - v]).collect();
        let hm = aggregate_heatmap(&set(vec![single(&values, 2, 2, 2, 0)]), &TokenRole::Concept, 2).unwrap();
        let expected = [0.0, 0.5, 0.25, 1.0];
        for (got, want) in hm.values.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn heatmap_resolution_must_cover_layers() {
        let ms = set(vec![single(&[0.5; 8], 2, 2, 2, 0)]);
        assert!(aggregate_heatmap(&ms, &TokenRole::Concept, 1).is_err());
    }

    #[test]
    fn second_session_is_rejected_until_first_ends() {
        let tap = AttentionTap::default();
        let first = begin_capture(&tap, &[1, 2], vec![], vec![]).unwrap();
        assert!(matches!(begin_capture(&tap, &[1, 2], vec![], vec![]), Err(Error::SessionAlreadyActive)));
        first.end();
        assert!(matches!(first.collect_maps(), Err(Error::EmptySession)));
        let second = begin_capture(&tap, &[1, 2], vec![], vec![]).unwrap();
        drop(second);
        assert!(!tap.is_active());
    }

    #[test]
    fn tap_averages_matching_passes_only() {
        let tap = AttentionTap::default();
        let session = begin_capture(&tap, &[3], vec![(TokenRole::Position(0), 0)], vec![]).unwrap();
        tap.record(&[3], || vec![single(&[0.2, 0.8], 1, 1, 2, 0)]);
        tap.record(&[3], || vec![single(&[0.4, 0.6], 1, 1, 2, 0)]);
        tap.record(&[4], || vec![single(&[1.0, 0.0], 1, 1, 2, 0)]);
        session.end();
        tap.record(&[3], || vec![single(&[1.0, 0.0], 1, 1, 2, 0)]);
        let maps = session.collect_maps().unwrap();
        assert_eq!(session.passes(), 2);
        assert!((maps.layers[0].values[0] - 0.3).abs() < 1e-15);
        assert!((maps.layers[0].values[1] - 0.7).abs() < 1e-15);
    }
}
