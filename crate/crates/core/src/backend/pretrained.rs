//! Adapter seam for a locally stored Stable Diffusion 2.1 style checkpoint in
//! the diffusers directory layout.
//!
//! The adapter reads the CLIP vocabulary, the token-embedding table of the text
//! encoder, and the U-Net tensor index (safetensors headers only). It exposes
//! the 16 cross-attention layers and the parameter-group partition. Denoising
//! itself needs an inference engine that this crate does not bundle, so the
//! compute entry points fail with [`Error::BackendUnsupported`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::params::ParamStore;
use super::schedule::NoiseSchedule;
use super::tokenizer::{TokenId, Tokenizer};
use super::{groups, Conditioning, DenoiseBatch, DiffusionBackend, StepGradients, TOKEN_EMBEDDINGS};
use crate::attention::{AttentionTap, LayerGeometry};
use crate::error::{Error, Result};
use crate::objectives::AttentionRegularizer;
use crate::tensor::Tensor;

pub const VOCAB_FILE: &str = "tokenizer/vocab.json";
pub const TEXT_ENCODER_FILE: &str = "text_encoder/model.safetensors";
pub const UNET_FILE: &str = "unet/diffusion_pytorch_model.safetensors";
pub const TOKEN_EMBEDDING_TENSOR: &str = "text_model.embeddings.token_embedding.weight";

/// Transformer blocks carrying cross-attention in the SD 2.x U-Net, in depth
/// order, with their latent-space side length at 512×512 input.
pub const SD21_CROSS_ATTENTION: [(&str, usize); 16] = [
    ("down_blocks.0.attentions.0", 64),
    ("down_blocks.0.attentions.1", 64),
    ("down_blocks.1.attentions.0", 32),
    ("down_blocks.1.attentions.1", 32),
    ("down_blocks.2.attentions.0", 16),
    ("down_blocks.2.attentions.1", 16),
    ("mid_block.attentions.0", 8),
    ("up_blocks.1.attentions.0", 16),
    ("up_blocks.1.attentions.1", 16),
    ("up_blocks.1.attentions.2", 16),
    ("up_blocks.2.attentions.0", 32),
    ("up_blocks.2.attentions.1", 32),
    ("up_blocks.2.attentions.2", 32),
    ("up_blocks.3.attentions.0", 64),
    ("up_blocks.3.attentions.1", 64),
    ("up_blocks.3.attentions.2", 64),
];

#[derive(Debug, Clone, Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Parsed safetensors header: tensor table plus the byte offset of the data section.
struct SafetensorsIndex {
    path: PathBuf,
    data_start: u64,
    tensors: BTreeMap<String, TensorInfo>,
}

impl SafetensorsIndex {
    fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut len = [0u8; 8];
        file.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
        let header_len = u64::from_le_bytes(len);
        let mut header = vec![0u8; header_len as usize];
        file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&header)?;
        let mut tensors = BTreeMap::new();
        for (name, value) in raw {
            if name == "__metadata__" {
                continue;
            }
            tensors.insert(name, serde_json::from_value(value)?);
        }
        Ok(Self { path: path.to_path_buf(), data_start: 8 + header_len, tensors })
    }

    fn read_f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let malformed = |reason: String| Error::MalformedArtifact { path: self.path.clone(), reason };
        let info = self.tensors.get(name).ok_or_else(|| malformed(format!("tensor {name} not found")))?;
        let [start, end] = info.data_offsets;
        let mut file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        file.seek(SeekFrom::Start(self.data_start + start)).map_err(|e| Error::io(&self.path, e))?;
        let mut bytes = vec![0u8; (end - start) as usize];
        file.read_exact(&mut bytes).map_err(|e| Error::io(&self.path, e))?;
        let values: Vec<f64> = match info.dtype.as_str() {
            "F32" => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            "F16" => bytes.chunks_exact(2).map(|c| f16_to_f64(u16::from_le_bytes([c[0], c[1]]))).collect(),
            "BF16" => bytes
                .chunks_exact(2)
                .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16) as f64)
                .collect(),
            other => return Err(malformed(format!("unsupported dtype {other} for {name}"))),
        };
        if values.len() != info.shape.iter().product::<usize>() {
            return Err(malformed(format!("{name}: data size does not match shape {:?}", info.shape)));
        }
        Ok((info.shape.clone(), values))
    }
}

fn f16_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let frac = (bits & 0x3ff) as f64;
    match exp {
        0 => sign * frac * 2f64.powi(-24),
        0x1f if frac == 0.0 => sign * f64::INFINITY,
        0x1f => f64::NAN,
        e => sign * (1.0 + frac / 1024.0) * 2f64.powi(e - 15),
    }
}

/// Group of a U-Net tensor name: `attn2` projections are cross-attention.
pub fn unet_group(tensor: &str) -> &'static str {
    if tensor.contains(".attn2.") {
        groups::CROSS_ATTENTION
    } else {
        groups::UNET_REST
    }
}

#[derive(Debug)]
pub struct PretrainedAdapter {
    root: PathBuf,
    tokenizer: Tokenizer,
    params: ParamStore,
    embedding_dim: usize,
    unet_tensors: Vec<String>,
    text_encoder_tensors: Vec<String>,
    schedule: NoiseSchedule,
    tap: AttentionTap,
}

/// Opens the checkpoint at `model_ref`. Never falls back to another backend.
pub fn pretrained_adapter(model_ref: &Path) -> Result<PretrainedAdapter> {
    PretrainedAdapter::open(model_ref)
}

impl PretrainedAdapter {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::WeightsUnavailable(format!("{} is not a directory", root.display())));
        }
        for rel in [VOCAB_FILE, TEXT_ENCODER_FILE, UNET_FILE] {
            if !root.join(rel).is_file() {
                return Err(Error::WeightsUnavailable(format!("missing {}", root.join(rel).display())));
            }
        }
        let vocab_path = root.join(VOCAB_FILE);
        let vocab_bytes = std::fs::read(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let vocab: BTreeMap<String, usize> = serde_json::from_slice(&vocab_bytes)?;
        let n_words = vocab.len();
        let mut words = vec![String::new(); n_words];
        for (word, id) in vocab {
            let slot = words.get_mut(id).ok_or_else(|| Error::MalformedArtifact {
                path: vocab_path.clone(),
                reason: format!("id {id} outside 0..{n_words}"),
            })?;
            *slot = word;
        }
        let tokenizer = Tokenizer::with_specials(words, "<|endoftext|>", Some("<|startoftext|>"), Some("</w>"))?;

        let text_index = SafetensorsIndex::open(&root.join(TEXT_ENCODER_FILE))?;
        let (shape, table) = text_index.read_f64(TOKEN_EMBEDDING_TENSOR)?;
        if shape.len() != 2 || shape[0] != tokenizer.len() {
            return Err(Error::MalformedArtifact {
                path: text_index.path.clone(),
                reason: format!("embedding table shape {shape:?} does not match vocabulary of {}", tokenizer.len()),
            });
        }
        let mut params = ParamStore::default();
        params.insert(TOKEN_EMBEDDINGS, shape.clone(), table);

        let unet_index = SafetensorsIndex::open(&root.join(UNET_FILE))?;
        for (block, _) in SD21_CROSS_ATTENTION {
            let probe = format!("{block}.transformer_blocks.0.attn2.to_k.weight");
            if !unet_index.tensors.contains_key(&probe) {
                return Err(Error::MalformedArtifact {
                    path: unet_index.path.clone(),
                    reason: format!("expected cross-attention tensor {probe}"),
                });
            }
        }
        // Scaled-linear schedule of SD 2.x.
        let betas = (0..1000)
            .map(|i| {
                let s = 0.00085f64.sqrt() + (0.012f64.sqrt() - 0.00085f64.sqrt()) * i as f64 / 999.0;
                s * s
            })
            .collect();
        Ok(Self {
            root: root.to_path_buf(),
            tokenizer,
            params,
            embedding_dim: shape[1],
            unet_tensors: unet_index.tensors.keys().cloned().collect(),
            text_encoder_tensors: text_index.tensors.keys().cloned().collect(),
            schedule: NoiseSchedule::from_betas(betas)?,
            tap: AttentionTap::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Tensor names of the checkpoint partitioned by parameter group.
    pub fn parameter_groups(&self) -> BTreeMap<&'static str, Vec<String>> {
        let mut out: BTreeMap<&'static str, Vec<String>> = BTreeMap::new();
        for name in &self.unet_tensors {
            out.entry(unet_group(name)).or_default().push(name.clone());
        }
        for name in &self.text_encoder_tensors {
            let group = if name == TOKEN_EMBEDDING_TENSOR { groups::TOKEN_EMBEDDINGS } else { groups::TEXT_ENCODER };
            out.entry(group).or_default().push(name.clone());
        }
        out
    }

    fn unsupported<T>(&self, operation: &str) -> Result<T> {
        Err(Error::BackendUnsupported { backend: self.name().to_string(), operation: operation.to_string() })
    }
}

impl DiffusionBackend for PretrainedAdapter {
    fn name(&self) -> &str {
        "pretrained-sd21"
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn tokenizer_mut(&mut self) -> &mut Tokenizer {
        &mut self.tokenizer
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    fn input_resolution(&self) -> usize {
        512
    }

    fn latent_shape(&self) -> Vec<usize> {
        vec![4, 64, 64]
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn cross_attention_layers(&self) -> Vec<LayerGeometry> {
        SD21_CROSS_ATTENTION
            .iter()
            .enumerate()
            .map(|(layer_id, &(_, side))| LayerGeometry { layer_id, height: side, width: side })
            .collect()
    }

    fn tap(&self) -> &AttentionTap {
        &self.tap
    }

    fn encode_text(&self, _ids: &[TokenId]) -> Result<Conditioning> {
        self.unsupported("encode_text")
    }

    fn encode_image(&self, _pixels: &Tensor) -> Result<Tensor> {
        self.unsupported("encode_image")
    }

    fn decode_latent(&self, _latent: &Tensor) -> Result<Tensor> {
        self.unsupported("decode_latent")
    }

    fn predict_noise(&self, _z_t: &Tensor, _t: usize, _cond: &Conditioning) -> Result<Tensor> {
        self.unsupported("predict_noise")
    }

    fn training_gradients(&self, _batch: &DenoiseBatch, _reg: Option<&AttentionRegularizer>) -> Result<StepGradients> {
        self.unsupported("training_gradients")
    }
}

/// Writes a miniature checkpoint in the layout [`PretrainedAdapter::open`] reads.
/// Used by tests and by anyone wiring up the adapter without real weights.
pub fn write_fixture_checkpoint(root: &Path, words: &[&str], embedding_dim: usize) -> Result<()> {
    use std::fs;
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    for dir in ["tokenizer", "text_encoder", "unet"] {
        mkdir(&root.join(dir))?;
    }
    let vocab: BTreeMap<&str, usize> = words.iter().enumerate().map(|(i, w)| (*w, i)).collect();
    let vocab_path = root.join(VOCAB_FILE);
    fs::write(&vocab_path, serde_json::to_vec(&vocab)?).map_err(|e| Error::io(&vocab_path, e))?;

    let table: Vec<f32> = (0..words.len() * embedding_dim).map(|i| (i as f32 * 0.37).sin()).collect();
    write_safetensors(&root.join(TEXT_ENCODER_FILE), &[(TOKEN_EMBEDDING_TENSOR, vec![words.len(), embedding_dim], &table)])?;

    let mut unet: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for (block, _) in SD21_CROSS_ATTENTION {
        for proj in ["to_q", "to_k", "to_v", "to_out.0"] {
            unet.push((format!("{block}.transformer_blocks.0.attn2.{proj}.weight"), vec![2, 2], vec![0.5; 4]));
        }
        unet.push((format!("{block}.transformer_blocks.0.attn1.to_q.weight"), vec![2, 2], vec![0.25; 4]));
    }
    unet.push(("conv_in.weight".into(), vec![2], vec![1.0, 2.0]));
    let refs: Vec<(&str, Vec<usize>, &[f32])> = unet.iter().map(|(n, s, v)| (n.as_str(), s.clone(), v.as_slice())).collect();
    write_safetensors(&root.join(UNET_FILE), &refs)
}

fn write_safetensors(path: &Path, tensors: &[(&str, Vec<usize>, &[f32])]) -> Result<()> {
    let mut header = serde_json::Map::new();
    let mut offset = 0u64;
    let mut data = Vec::new();
    for (name, shape, values) in tensors {
        let end = offset + 4 * values.len() as u64;
        header.insert(
            name.to_string(),
            serde_json::json!({ "dtype": "F32", "shape": shape, "data_offsets": [offset, end] }),
        );
        data.extend(values.iter().flat_map(|v| v.to_le_bytes()));
        offset = end;
    }
    let header = serde_json::to_vec(&header)?;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend(header);
    bytes.extend(data);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const WORDS: &[&str] = &["<|startoftext|>", "<|endoftext|>", "a</w>", "photo</w>", "of</w>", "toy</w>", "toy"];

    #[test]
    fn missing_weights_fail_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let err = pretrained_adapter(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, Error::WeightsUnavailable(_)));
        let err = pretrained_adapter(dir.path()).unwrap_err();
        assert!(matches!(err, Error::WeightsUnavailable(_)));
    }

    #[test]
    fn fixture_checkpoint_exposes_sixteen_taps() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_checkpoint(dir.path(), WORDS, 8).unwrap();
        let adapter = pretrained_adapter(dir.path()).unwrap();
        assert_eq!(adapter.cross_attention_layers().len(), 16);
        assert_eq!(adapter.embedding_dim(), 8);
        let groups = adapter.parameter_groups();
        assert_eq!(groups[groups::CROSS_ATTENTION].len(), 64);
        assert!(groups[groups::UNET_REST].iter().all(|n| !n.contains("attn2")));
        assert_eq!(groups[groups::TOKEN_EMBEDDINGS], vec![TOKEN_EMBEDDING_TENSOR.to_string()]);
        assert!(matches!(adapter.predict_noise(&Tensor::zeros(&[1]), 0, &Conditioning {
            token_ids: vec![],
            context: Tensor::zeros(&[0]),
        }), Err(Error::BackendUnsupported { .. })));
    }

    #[test]
    fn whole_word_lookup_uses_suffix() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_checkpoint(dir.path(), WORDS, 4).unwrap();
        let adapter = pretrained_adapter(dir.path()).unwrap();
        assert_eq!(adapter.tokenize("a photo of a toy"), vec![0, 2, 3, 4, 2, 5]);
        assert_eq!(adapter.tokenize("zebra"), vec![0, 1]);
    }

    #[test]
    fn half_precision_decoding() {
        assert_eq!(f16_to_f64(0x3c00), 1.0);
        assert_eq!(f16_to_f64(0xc000), -2.0);
        assert_eq!(f16_to_f64(0x0000), 0.0);
        assert_eq!(f16_to_f64(0x3555), 0.333251953125);
    }
}
