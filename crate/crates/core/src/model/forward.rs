use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{init_params, Block, ModelParams, Params};
use super::ModelConfig;
use crate::data::{Post, UserSequence};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Graph handles for one batch forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutput {
    /// Sequence embeddings `[N × emb]`.
    pub embeddings: Var,
    /// Class probabilities `[N × 2]`, column 1 = bad actor.
    pub probs: Var,
    /// Contrastive projections `[N × emb]`.
    pub z: Var,
}

/// Registers every parameter as a graph leaf.
pub fn bind(g: &mut Graph, params: &ModelParams, trainable: bool) -> Params<Var> {
    params.map(|_, t| g.leaf(t.clone().with_requires_grad(trainable)))
}

/// Forward-pass builder over a bound parameter set.
pub struct Forward<'a> {
    pub g: &'a mut Graph,
    p: &'a Params<Var>,
    cfg: &'a ModelConfig,
    dropout: Option<ChaCha8Rng>,
    trace: Option<Vec<(usize, Var)>>,
}

fn lower_triangular(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

impl<'a> Forward<'a> {
    pub fn new(g: &'a mut Graph, p: &'a Params<Var>, cfg: &'a ModelConfig) -> Self {
        Forward {
            g,
            p,
            cfg,
            dropout: None,
            trace: None,
        }
    }

    /// Enables dropout (when the config asks for it) with a seeded mask stream.
    pub fn training(mut self, seed: u64) -> Self {
        if self.cfg.dropout > 0.0 {
            self.dropout = Some(ChaCha8Rng::seed_from_u64(seed));
        }
        self
    }

    /// Keeps the decoder attention-weight matrices as `(layer, var)`.
    pub fn record_attention(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn decoder_attention(&self) -> &[(usize, Var)] {
        self.trace.as_deref().unwrap_or(&[])
    }

    fn apply_dropout(&mut self, x: Var) -> Result<Var> {
        let Some(rng) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let p = self.cfg.dropout;
        let t = self.g.value(x);
        let keep = 1.0 / (1.0 - p);
        let mask = t
            .data()
            .iter()
            .map(|_| if rng.gen_bool(p) { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(t.shape().to_vec(), mask)?;
        let m = self.g.constant(mask);
        self.g.mul(x, m)
    }

    fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.g.matmul(x, w)?;
        self.g.add_row(y, b)
    }

    /// Multi-head self-attention applied independently to each row segment.
    fn attention(
        &mut self,
        x: Var,
        blk: &Block<Var>,
        segments: &[(usize, usize)],
        layer: usize,
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(x, blk.wq, blk.bq)?;
        let k = self.linear(x, blk.wk, blk.bk)?;
        let v = self.linear(x, blk.wv, blk.bv)?;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut seg_out = Vec::with_capacity(segments.len());
        for &(start, len) in segments {
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let qs = self.g.slice(q, start, len, h * hd, hd)?;
                let ks = self.g.slice(k, start, len, h * hd, hd)?;
                let vs = self.g.slice(v, start, len, h * hd, hd)?;
                let scores = self.g.matmul_nt(qs, ks)?;
                let scores = self.g.scale(scores, scale)?;
                let weights = if causal {
                    self.g.masked_softmax(scores, &lower_triangular(len))?
                } else {
                    self.g.softmax_lastdim(scores)?
                };
                if causal {
                    if let Some(t) = self.trace.as_mut() {
                        t.push((layer, weights));
                    }
                }
                heads.push(self.g.matmul(weights, vs)?);
            }
            seg_out.push(if heads.len() == 1 {
                heads[0]
            } else {
                self.g.concat_cols(&heads)?
            });
        }
        let cat = if seg_out.len() == 1 {
            seg_out[0]
        } else {
            self.g.concat_rows(&seg_out)?
        };
        self.linear(cat, blk.wo, blk.bo)
    }

    /// Attention sub-layer then feed-forward sub-layer, each followed by a
    /// residual connection and layer norm.
    fn block(
        &mut self,
        x: Var,
        blk: &Block<Var>,
        segments: &[(usize, usize)],
        layer: usize,
        causal: bool,
    ) -> Result<Var> {
        let a = self.attention(x, blk, segments, layer, causal)?;
        let a = self.apply_dropout(a)?;
        let r = self.g.add(x, a)?;
        let x1 = self.g.layer_norm(r, blk.ln1_gain, blk.ln1_bias)?;
        let h = self.linear(x1, blk.ff1_w, blk.ff1_b)?;
        let h = self.g.relu(h)?;
        let f = self.linear(h, blk.ff2_w, blk.ff2_b)?;
        let f = self.apply_dropout(f)?;
        let r = self.g.add(x1, f)?;
        self.g.layer_norm(r, blk.ln2_gain, blk.ln2_bias)
    }

    /// Post embeddings `[posts × emb]`.
    ///
    /// Only unmasked token slots are materialised. Padding keys would receive
    /// zero attention and padding rows are excluded from pooling, so dropping
    /// them gives the same result as masking them.
    pub fn encode_posts(&mut self, posts: &[&Post]) -> Result<Var> {
        if posts.is_empty() {
            return Err(Error::contract("encode_posts: no posts"));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(posts.len());
        for (i, post) in posts.iter().enumerate() {
            if post.slots() > self.cfg.tokens_per_post {
                return Err(Error::contract(format!(
                    "post {i} has {} slots, model expects at most {}",
                    post.slots(),
                    self.cfg.tokens_per_post
                )));
            }
            let start = ids.len();
            for (pos, id) in post.tokens() {
                positions.push(pos);
                ids.push(id);
            }
            if ids.len() == start {
                return Err(Error::contract(format!("post {i} is all padding")));
            }
            segments.push((start, ids.len() - start));
        }
        let tok = self.g.embedding_rows(self.p.tok_emb, &ids)?;
        let pos = self.g.embedding_rows(self.p.tok_pos, &positions)?;
        let mut h = self.g.add(tok, pos)?;
        if self.cfg.variant.uses_local_global() {
            for (l, blk) in self.p.encoder.iter().enumerate() {
                h = self.block(h, blk, &segments, l, false)?;
            }
        }
        self.g.segment_mean(h, &segments)
    }

    /// Runs the sequence level over stacked post embeddings, where sequence
    /// `i` owns the next `lens[i]` rows in chronological order. Returns the
    /// final hidden states of every position and the per-sequence readout.
    pub fn encode_sequences(&mut self, post_embs: Var, lens: &[usize]) -> Result<(Var, Var)> {
        let mut segments = Vec::with_capacity(lens.len());
        let mut positions = Vec::new();
        let mut start = 0;
        for (i, &len) in lens.iter().enumerate() {
            if len == 0 {
                return Err(Error::contract(format!("sequence {i} is empty")));
            }
            if len > self.cfg.window {
                return Err(Error::contract(format!(
                    "sequence {i} has {len} posts, window is {}",
                    self.cfg.window
                )));
            }
            segments.push((start, len));
            positions.extend(0..len);
            start += len;
        }
        if segments.is_empty() {
            return Err(Error::contract("encode_sequences: no sequences"));
        }
        if !self.cfg.variant.uses_local_global() {
            let pooled = self.g.segment_mean(post_embs, &segments)?;
            return Ok((post_embs, pooled));
        }
        let pos = self.g.embedding_rows(self.p.post_pos, &positions)?;
        let mut h = self.g.add(post_embs, pos)?;
        for (l, blk) in self.p.decoder.iter().enumerate() {
            h = self.block(h, blk, &segments, l, true)?;
        }
        let last: Vec<usize> = segments.iter().map(|&(s, l)| s + l - 1).collect();
        let readout = self.g.embedding_rows(h, &last)?;
        Ok((h, readout))
    }

    /// Softmax of the linear classifier, `[N × 2]`.
    pub fn classify(&mut self, emb: Var) -> Result<Var> {
        let logits = self.g.matmul(emb, self.p.classifier)?;
        self.g.softmax_lastdim(logits)
    }

    /// Two-layer projection with a ReLU between, `[N × emb]`.
    pub fn project(&mut self, emb: Var) -> Result<Var> {
        let h = self.g.matmul(emb, self.p.proj1)?;
        let h = self.g.relu(h)?;
        self.g.matmul(h, self.p.proj2)
    }

    /// Full pipeline for a batch. Identical posts across users (e.g. shared by
    /// an original sequence and its attacked copy) are encoded once.
    pub fn forward_users(&mut self, users: &[&UserSequence]) -> Result<BatchOutput> {
        let mut unique: Vec<&Post> = Vec::new();
        let mut index: HashMap<&Post, usize> = HashMap::new();
        let mut rows = Vec::new();
        let mut lens = Vec::with_capacity(users.len());
        for u in users {
            if u.posts.is_empty() {
                return Err(Error::contract(format!("user {} has no posts", u.user_id)));
            }
            for p in &u.posts {
                let next = unique.len();
                let id = *index.entry(p).or_insert(next);
                if id == next {
                    unique.push(p);
                }
                rows.push(id);
            }
            lens.push(u.posts.len());
        }
        let post_embs = self.encode_posts(&unique)?;
        let stacked = self.g.embedding_rows(post_embs, &rows)?;
        let (_, embeddings) = self.encode_sequences(stacked, &lens)?;
        let probs = self.classify(embeddings)?;
        let z = self.project(embeddings)?;
        Ok(BatchOutput { embeddings, probs, z })
    }
}

/// Outputs of one inference pass on a single user.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub embedding: Vec<f64>,
    /// `(benign, bad)`
    pub probs: [f64; 2],
    pub z: Vec<f64>,
}

/// Argmax of `(benign, bad)` with ties going to bad.
pub fn predicted_label(probs: [f64; 2]) -> u8 {
    u8::from(probs[1] >= probs[0])
}

/// Frozen parameters plus config; convenience API for inference and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

const INFERENCE_CHUNK: usize = 64;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        Ok(Model { config, params })
    }

    fn with_forward<R>(&self, f: impl FnOnce(&mut Forward) -> Result<R>) -> Result<R> {
        let mut g = Graph::new();
        let p = bind(&mut g, &self.params, false);
        let mut fw = Forward::new(&mut g, &p, &self.config);
        f(&mut fw)
    }

    pub fn forward(&self, user: &UserSequence) -> Result<ForwardOutput> {
        self.with_forward(|fw| {
            let out = fw.forward_users(&[user])?;
            let pr = fw.g.data(out.probs);
            Ok(ForwardOutput {
                embedding: fw.g.data(out.embeddings).to_vec(),
                probs: [pr[0], pr[1]],
                z: fw.g.data(out.z).to_vec(),
            })
        })
    }

    /// `(benign, bad)` probabilities for every user.
    pub fn predict_probs(&self, users: &[UserSequence]) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(users.len());
        for chunk in users.chunks(INFERENCE_CHUNK) {
            let refs: Vec<&UserSequence> = chunk.iter().collect();
            self.with_forward(|fw| {
                let o = fw.forward_users(&refs)?;
                out.extend(fw.g.data(o.probs).chunks(2).map(|r| [r[0], r[1]]));
                Ok(())
            })?;
        }
        Ok(out)
    }

    pub fn predict(&self, users: &[UserSequence]) -> Result<Vec<u8>> {
        Ok(self.predict_probs(users)?.into_iter().map(predicted_label).collect())
    }

    pub fn encode_post(&self, post: &Post) -> Result<Vec<f64>> {
        self.with_forward(|fw| {
            let e = fw.encode_posts(&[post])?;
            Ok(fw.g.data(e).to_vec())
        })
    }

    /// Final hidden state of every position for one sequence of post
    /// embeddings, plus the readout vector.
    pub fn sequence_states(&self, post_embs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let rows: Vec<&[f64]> = post_embs.iter().map(Vec::as_slice).collect();
        let t = Tensor::from_rows(&rows)?;
        self.with_forward(|fw| {
            let h = fw.g.constant(t);
            let (states, readout) = fw.encode_sequences(h, &[post_embs.len()])?;
            let c = fw.g.value(states).last_dim();
            let states = fw.g.data(states).chunks(c).map(<[f64]>::to_vec).collect();
            Ok((states, fw.g.data(readout).to_vec()))
        })
    }

    pub fn classify(&self, emb: &[f64]) -> Result<[f64; 2]> {
        let t = Tensor::new(vec![1, emb.len()], emb.to_vec())?;
        self.with_forward(|fw| {
            let e = fw.g.constant(t);
            let p = fw.classify(e)?;
            let d = fw.g.data(p);
            Ok([d[0], d[1]])
        })
    }

    pub fn project(&self, emb: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::new(vec![1, emb.len()], emb.to_vec())?;
        self.with_forward(|fw| {
            let e = fw.g.constant(t);
            let z = fw.project(e)?;
            Ok(fw.g.data(z).to_vec())
        })
    }

    /// Decoder attention matrices for one user, `(layer, weights)` per head.
    pub fn decoder_attention(&self, user: &UserSequence) -> Result<Vec<(usize, Tensor)>> {
        let mut g = Graph::new();
        let p = bind(&mut g, &self.params, false);
        let mut fw = Forward::new(&mut g, &p, &self.config).record_attention();
        fw.forward_users(&[user])?;
        let trace = fw.decoder_attention().to_vec();
        Ok(trace.into_iter().map(|(l, v)| (l, g.value(v).clone())).collect())
    }
}
