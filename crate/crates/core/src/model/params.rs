use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::Result;
use crate::tensor::Tensor;

/// Weights of one transformer block (self-attention + feed-forward, post-LN).
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ff1_w: T,
    pub ff1_b: T,
    pub ff2_w: T,
    pub ff2_b: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

const BLOCK_FIELDS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gain", "ln1_bias", "ff1_w", "ff1_b", "ff2_w", "ff2_b",
    "ln2_gain", "ln2_bias",
];

impl<T> Block<T> {
    fn fields(&self) -> [&T; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ff1_w,
            &self.ff1_b,
            &self.ff2_w,
            &self.ff2_b,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ff1_w,
            &mut self.ff1_b,
            &mut self.ff2_w,
            &mut self.ff2_b,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    fn from_fields(f: [T; 16]) -> Self {
        let [wq, bq, wk, bk, wv, bv, wo, bo, ln1_gain, ln1_bias, ff1_w, ff1_b, ff2_w, ff2_b, ln2_gain, ln2_bias] = f;
        Block {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln1_gain,
            ln1_bias,
            ff1_w,
            ff1_b,
            ff2_w,
            ff2_b,
            ln2_gain,
            ln2_bias,
        }
    }
}

/// Every learned matrix of the model, generic over storage so the same layout
/// serves owned tensors and graph handles.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    /// Token embeddings `[vocab × emb]`.
    pub tok_emb: T,
    /// Token positions within a post `[d × emb]`.
    pub tok_pos: T,
    /// Post positions within a sequence `[T × emb]`.
    pub post_pos: T,
    pub encoder: Vec<Block<T>>,
    pub decoder: Vec<Block<T>>,
    /// Linear classifier `[emb × 2]`.
    pub classifier: T,
    pub proj1: T,
    pub proj2: T,
}

pub type ModelParams = Params<Tensor>;

impl<T> Params<T> {
    /// `(name, value)` in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("tok_pos".to_string(), &self.tok_pos),
            ("post_pos".to_string(), &self.post_pos),
        ];
        for (prefix, blocks) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (l, b) in blocks.iter().enumerate() {
                for (name, v) in BLOCK_FIELDS.iter().zip(b.fields()) {
                    out.push((format!("{prefix}.{l}.{name}"), v));
                }
            }
        }
        out.push(("classifier".to_string(), &self.classifier));
        out.push(("proj1".to_string(), &self.proj1));
        out.push(("proj2".to_string(), &self.proj2));
        out
    }

    /// Mutable references in the same order as [`Params::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.tok_emb, &mut self.tok_pos, &mut self.post_pos];
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.classifier);
        out.push(&mut self.proj1);
        out.push(&mut self.proj2);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        let mut block = |prefix: &str, l: usize, b: &Block<T>| {
            let vals = b.fields();
            Block::from_fields(std::array::from_fn(|i| {
                f(&format!("{prefix}.{l}.{}", BLOCK_FIELDS[i]), vals[i])
            }))
        };
        let encoder = self
            .encoder
            .iter()
            .enumerate()
            .map(|(l, b)| block("enc", l, b))
            .collect();
        let decoder = self
            .decoder
            .iter()
            .enumerate()
            .map(|(l, b)| block("dec", l, b))
            .collect();
        Params {
            tok_emb: f("tok_emb", &self.tok_emb),
            tok_pos: f("tok_pos", &self.tok_pos),
            post_pos: f("post_pos", &self.post_pos),
            encoder,
            decoder,
            classifier: f("classifier", &self.classifier),
            proj1: f("proj1", &self.proj1),
            proj2: f("proj2", &self.proj2),
        }
    }
}

impl ModelParams {
    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Expected shape of every parameter, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> Params<Vec<usize>> {
    let (e, f) = (cfg.emb_dim, cfg.ffn_dim());
    let block = || Block {
        wq: vec![e, e],
        bq: vec![e],
        wk: vec![e, e],
        bk: vec![e],
        wv: vec![e, e],
        bv: vec![e],
        wo: vec![e, e],
        bo: vec![e],
        ln1_gain: vec![e],
        ln1_bias: vec![e],
        ff1_w: vec![e, f],
        ff1_b: vec![f],
        ff2_w: vec![f, e],
        ff2_b: vec![e],
        ln2_gain: vec![e],
        ln2_bias: vec![e],
    };
    Params {
        tok_emb: vec![cfg.vocab_size, e],
        tok_pos: vec![cfg.tokens_per_post, e],
        post_pos: vec![cfg.window, e],
        encoder: (0..cfg.enc_layers).map(|_| block()).collect(),
        decoder: (0..cfg.dec_layers).map(|_| block()).collect(),
        classifier: vec![e, 2],
        proj1: vec![e, e],
        proj2: vec![e, e],
    }
}

/// Glorot-uniform matrices, zero biases, unit layer-norm gains.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(param_shapes(cfg).map(|name, shape| {
        if shape.len() == 2 {
            let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            let data = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-limit..limit)).collect();
            Tensor::new(shape.clone(), data).expect("matrix shape")
        } else if name.ends_with("_gain") {
            Tensor::full(shape, 1.0)
        } else {
            Tensor::zeros(shape)
        }
    }))
}
