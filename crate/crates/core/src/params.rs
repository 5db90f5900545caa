use std::ops::Range;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::tensor::Scalar;

/// Name, shape and location of one tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSlots {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Index of every tensor in the directory; `layers[i]` holds per-layer indices.
#[derive(Debug, Clone)]
pub(crate) struct Slots {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

/// The tensor directory implied by a [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct ParamLayout {
    tensors: Vec<TensorInfo>,
    pub(crate) slots: Slots,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f, s) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len);
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let info = TensorInfo { name, shape, offset };
            offset += info.len();
            tensors.push(info);
            tensors.len() - 1
        };
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![s, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            layers.push(LayerSlots {
                ln1_g: push(p("ln1.gamma"), vec![d]),
                ln1_b: push(p("ln1.beta"), vec![d]),
                wq: push(p("attn.wq"), vec![d, d]),
                wk: push(p("attn.wk"), vec![d, d]),
                wv: push(p("attn.wv"), vec![d, d]),
                wo: push(p("attn.wo"), vec![d, d]),
                ln2_g: push(p("ln2.gamma"), vec![d]),
                ln2_b: push(p("ln2.beta"), vec![d]),
                w1: push(p("ffn.w1"), vec![d, f]),
                b1: push(p("ffn.b1"), vec![f]),
                w2: push(p("ffn.w2"), vec![f, d]),
                b2: push(p("ffn.b2"), vec![d]),
            });
        }
        let lnf_g = push("ln_f.gamma".into(), vec![d]);
        let lnf_b = push("ln_f.beta".into(), vec![d]);
        let out_w = push("out.w".into(), vec![d, v]);
        let out_b = push("out.b".into(), vec![v]);
        ParamLayout {
            tensors,
            slots: Slots { tok_emb, pos_emb, layers, lnf_g, lnf_b, out_w, out_b },
            total: offset,
        }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub(crate) fn range(&self, slot: usize) -> Range<usize> {
        self.tensors[slot].range()
    }
}

/// Weights of the transformer, stored in one flat buffer in directory order.
#[derive(Debug)]
pub struct ModelParams<T: Scalar = f32> {
    config: ModelConfig,
    layout: ParamLayout,
    data: Vec<T>,
    fingerprint: OnceLock<u64>,
}

impl<T: Scalar> Clone for ModelParams<T> {
    fn clone(&self) -> Self {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.clone(),
            fingerprint: self.fingerprint.clone(),
        }
    }
}

impl<T: Scalar> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Scaled-uniform initialisation: weight matrices draw from ±1/√fan_in,
    /// embeddings from ±1/√d_model, biases start at zero and norms at identity.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut data = vec![T::zero(); layout.total_len()];
        for info in layout.tensors() {
            let name = info.name.as_str();
            let slice = &mut data[info.range()];
            if name.ends_with("gamma") {
                slice.fill(T::one());
            } else if name.ends_with("beta") || name.ends_with(".b") || name.ends_with("b1") || name.ends_with("b2") {
                // zero
            } else {
                let fan_in = if name.ends_with("emb") { config.d_model } else { info.shape[0] };
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in slice.iter_mut() {
                    *v = T::from_f64_lossy(rng.gen_range(-bound..bound));
                }
            }
        }
        Ok(ModelParams { config: config.clone(), layout, data, fingerprint: OnceLock::new() })
    }

    pub fn from_data(config: &ModelConfig, data: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        if data.len() != layout.total_len() {
            return Err(crate::Error::Config(format!(
                "expected {} parameters, got {}",
                layout.total_len(),
                data.len()
            )));
        }
        Ok(ModelParams { config: config.clone(), layout, data, fingerprint: OnceLock::new() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the flat buffer. Invalidates the cached fingerprint.
    pub fn data_mut(&mut self) -> &mut [T] {
        self.fingerprint = OnceLock::new();
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.tensors().iter().find(|t| t.name == name).map(|t| &self.data[t.range()])
    }

    pub(crate) fn slot(&self, slot: usize) -> &[T] {
        &self.data[self.layout.range(slot)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Content hash used to tie caches to the weights they were built from.
    pub fn fingerprint(&self) -> u64 {
        *self.fingerprint.get_or_init(|| {
            let mut h = Fnv::new();
            h.write(serde_json::to_string(&self.config).unwrap_or_default().as_bytes());
            for v in &self.data {
                h.write(&v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
            }
            h.finish()
        })
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let data = self.data.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect();
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data,
            fingerprint: OnceLock::new(),
        }
    }
}

/// One gradient tensor per parameter tensor, in the same flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar = f32> {
    pub data: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Gradients { data: vec![T::zero(); params.data().len()] }
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&g| g * g).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.data {
            *g = *g * s;
        }
    }

    pub fn add(&mut self, other: &Self) {
        crate::tensor::add_assign(&mut self.data, &other.data);
    }

    pub fn tensor<'a>(&'a self, params: &ModelParams<T>, name: &str) -> Option<&'a [T]> {
        params.layout().tensors().iter().find(|t| t.name == name).map(|t| &self.data[t.range()])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 12,
            max_seq_len: 6,
            special_tokens: Default::default(),
        }
    }

    #[test]
    fn layout_is_dense_and_determined_by_config() {
        let layout = ParamLayout::new(&cfg());
        let mut expect = 0;
        for t in layout.tensors() {
            assert_eq!(t.offset, expect);
            expect += t.len();
        }
        assert_eq!(expect, layout.total_len());
        let per_layer = 2 * 8 + 4 * 64 + 2 * 8 + 8 * 12 + 12 + 12 * 8 + 8;
        assert_eq!(layout.total_len(), 10 * 8 + 6 * 8 + 2 * per_layer + 16 + 80 + 10);
    }

    #[test]
    fn init_respects_bounds_and_fingerprint_tracks_mutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParams::<f32>::init(&cfg(), &mut rng).unwrap();
        let wq = p.tensor("layers.0.attn.wq").unwrap();
        assert!(wq.iter().all(|v| v.abs() <= 1.0 / 8f32.sqrt()));
        assert!(p.tensor("layers.1.ln2.gamma").unwrap().iter().all(|&v| v == 1.0));
        let fp = p.fingerprint();
        assert_eq!(fp, p.clone().fingerprint());
        p.data_mut()[0] += 1.0;
        assert_ne!(fp, p.fingerprint());
    }
}
