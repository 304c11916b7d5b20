use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::seqdata::{Alphabet, EncodedSequence, AMINO_ACIDS};

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics collected by a training-mode decoder pass.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Tape handles produced by [`Relso::encode_graph`].
pub struct EncodeVars {
    /// `[B, T, D]`
    pub embeddings: Var,
    /// `[B, T]`
    pub pooling: Var,
    /// `[B, d_latent]`
    pub z: Var,
    /// Per layer, `[B * H, T, T]`.
    pub attention: Vec<Var>,
}

/// Encoder outputs for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeOutput {
    /// `[T, D]`
    pub embeddings: Tensor,
    pub pooling: Vec<f64>,
    pub z: Vec<f64>,
    /// `[n_layers, n_heads, T, T]`
    pub attention: Tensor,
}

/// Transformer encoder, attention-pooling bottleneck, convolutional decoder
/// and spectrally penalized fitness head.
#[derive(Clone, Debug)]
pub struct Relso {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn xavier(rng: &mut rng::Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-a..a)).collect()).expect("shape")
}

fn unit_vector(rng: &mut rng::Rng, n: usize) -> Tensor {
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Tensor::vector(&v.iter().map(|x| x / norm).collect::<Vec<_>>())
}

/// Sinusoidal position table `[T, D]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("shape")
}

/// Names of the fitness-head matrices that carry a spectral penalty.
pub const SPECTRAL_WEIGHTS: [&str; 2] = ["head.w1", "head.w2"];

impl Relso {
    /// Randomly initialized model; the same `(config, seed)` always yields the same parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut r = rng::stream(seed, rng::INIT);
        let mut p = ParamStore::new();
        let (d, h, t, v) = (c.d_embed, c.d_hidden, c.max_len, c.vocab_size);

        let emb: Vec<f64> = (0..v * d).map(|_| StandardNormal.sample(&mut r)).collect();
        p.insert("embed.tokens", Tensor::new(vec![v, d], emb)?)?;
        for l in 0..c.n_layers {
            let pre = format!("enc.{l}");
            p.insert(format!("{pre}.ln1.gamma"), Tensor::full(&[d], 1.0))?;
            p.insert(format!("{pre}.ln1.beta"), Tensor::zeros(&[d]))?;
            p.insert(format!("{pre}.attn.wqkv"), xavier(&mut r, d, d, &[d, 3 * d]))?;
            p.insert(format!("{pre}.attn.bqkv"), Tensor::zeros(&[3 * d]))?;
            p.insert(format!("{pre}.attn.wo"), xavier(&mut r, d, d, &[d, d]))?;
            p.insert(format!("{pre}.attn.bo"), Tensor::zeros(&[d]))?;
            p.insert(format!("{pre}.ln2.gamma"), Tensor::full(&[d], 1.0))?;
            p.insert(format!("{pre}.ln2.beta"), Tensor::zeros(&[d]))?;
            p.insert(format!("{pre}.ff.w1"), xavier(&mut r, d, h, &[d, h]))?;
            p.insert(format!("{pre}.ff.b1"), Tensor::zeros(&[h]))?;
            p.insert(format!("{pre}.ff.w2"), xavier(&mut r, h, d, &[h, d]))?;
            p.insert(format!("{pre}.ff.b2"), Tensor::zeros(&[d]))?;
        }
        p.insert("enc.ln_f.gamma", Tensor::full(&[d], 1.0))?;
        p.insert("enc.ln_f.beta", Tensor::zeros(&[d]))?;

        p.insert("pool.score.w", xavier(&mut r, d, 1, &[d, 1]))?;
        p.insert("pool.score.b", Tensor::zeros(&[1]))?;
        p.insert("pool.proj.w", xavier(&mut r, d, c.d_latent, &[d, c.d_latent]))?;
        p.insert("pool.proj.b", Tensor::zeros(&[c.d_latent]))?;

        let ch = c.decoder_channels;
        let k = c.decoder_kernel;
        p.insert("dec.in.w", xavier(&mut r, c.d_latent, t * ch, &[c.d_latent, t * ch]))?;
        p.insert("dec.in.b", Tensor::zeros(&[t * ch]))?;
        for i in 0..4 {
            let cout = if i == 3 { v } else { ch };
            p.insert(format!("dec.conv{i}.w"), xavier(&mut r, k * ch, k * cout, &[k, ch, cout]))?;
            p.insert(format!("dec.conv{i}.b"), Tensor::zeros(&[cout]))?;
            if i < 3 {
                p.insert(format!("dec.bn{i}.gamma"), Tensor::full(&[ch], 1.0))?;
                p.insert(format!("dec.bn{i}.beta"), Tensor::zeros(&[ch]))?;
                p.insert_buffer(format!("dec.bn{i}.running_mean"), Tensor::zeros(&[ch]))?;
                p.insert_buffer(format!("dec.bn{i}.running_var"), Tensor::full(&[ch], 1.0))?;
            }
        }

        let f = c.fitness_hidden;
        p.insert("head.w1", xavier(&mut r, c.d_latent, f, &[c.d_latent, f]))?;
        p.insert("head.b1", Tensor::zeros(&[f]))?;
        p.insert("head.w2", xavier(&mut r, f, 1, &[f, 1]))?;
        p.insert("head.b2", Tensor::zeros(&[1]))?;
        for (name, (m, n)) in SPECTRAL_WEIGHTS.iter().zip([(c.d_latent, f), (f, 1)]) {
            p.insert_buffer(format!("{name}.u"), unit_vector(&mut r, m))?;
            p.insert_buffer(format!("{name}.v"), unit_vector(&mut r, n))?;
        }
        Ok(Self { config, params: p })
    }

    fn check_batch(&self, batch: &[&EncodedSequence]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        for s in batch {
            if s.tokens.len() != self.config.max_len {
                return Err(Error::shape(
                    "encode",
                    format!("sequence padded to {} but model max_len is {}", s.tokens.len(), self.config.max_len),
                ));
            }
            if s.length == 0 {
                return Err(Error::Data("sequence has no residues".into()));
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::shape("encode", format!("token {t} out of range")));
            }
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (g.param(&self.params, w)?, g.param(&self.params, b)?);
        let y = g.matmul(x, w)?;
        g.add_broadcast(y, b)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = g.param(&self.params, &format!("{prefix}.gamma"))?;
        let beta = g.param(&self.params, &format!("{prefix}.beta"))?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    /// Encoder forward pass on the tape.
    pub fn encode_graph(&self, g: &mut Graph, batch: &[&EncodedSequence]) -> Result<EncodeVars> {
        self.check_batch(batch)?;
        let c = &self.config;
        let (b, t, d, nh) = (batch.len(), c.max_len, c.d_embed, c.n_heads);
        let dh = c.head_dim();
        let tokens: Vec<usize> = batch.iter().flat_map(|s| s.tokens.iter().copied()).collect();
        let key_mask: Vec<bool> = batch.iter().flat_map(|s| s.mask()).collect();
        // [B*H, T(query), T(key)]
        let attn_mask: Vec<bool> = (0..b)
            .flat_map(|bi| {
                let km = &key_mask[bi * t..(bi + 1) * t];
                std::iter::repeat_n(km, nh * t).flatten().copied()
            })
            .collect();

        let table = g.param(&self.params, "embed.tokens")?;
        let mut x = g.embedding(table, &tokens, &[b, t])?;
        let pe = g.constant(positional_encoding(t, d));
        x = g.add_broadcast(x, pe)?;

        let mut attention = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let pre = format!("enc.{l}");
            let h = self.layer_norm(g, x, &format!("{pre}.ln1"))?;
            let qkv = self.linear(g, h, &format!("{pre}.attn.wqkv"), &format!("{pre}.attn.bqkv"))?;
            let heads = |g: &mut Graph, part: usize, axes: &[usize], shape: &[usize]| -> Result<Var> {
                let s = g.slice(qkv, 2, part * d, d)?;
                let s = g.reshape(s, &[b, t, nh, dh])?;
                let s = g.permute(s, axes)?;
                g.reshape(s, shape)
            };
            let q = heads(g, 0, &[0, 2, 1, 3], &[b * nh, t, dh])?;
            let kt = heads(g, 1, &[0, 2, 3, 1], &[b * nh, dh, t])?;
            let v = heads(g, 2, &[0, 2, 1, 3], &[b * nh, t, dh])?;
            let scores = g.bmm(q, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = g.softmax(scores, Some(&attn_mask))?;
            attention.push(attn);
            let o = g.bmm(attn, v)?;
            let o = g.reshape(o, &[b, nh, t, dh])?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            let o = g.reshape(o, &[b, t, d])?;
            let o = self.linear(g, o, &format!("{pre}.attn.wo"), &format!("{pre}.attn.bo"))?;
            x = g.add(x, o)?;

            let h = self.layer_norm(g, x, &format!("{pre}.ln2"))?;
            let f = self.linear(g, h, &format!("{pre}.ff.w1"), &format!("{pre}.ff.b1"))?;
            let f = g.relu(f)?;
            let f = self.linear(g, f, &format!("{pre}.ff.w2"), &format!("{pre}.ff.b2"))?;
            x = g.add(x, f)?;
        }
        let embeddings = self.layer_norm(g, x, "enc.ln_f")?;

        let scores = self.linear(g, embeddings, "pool.score.w", "pool.score.b")?;
        let scores = g.reshape(scores, &[b, t])?;
        let pooling = g.softmax(scores, Some(&key_mask))?;
        let proj = self.linear(g, embeddings, "pool.proj.w", "pool.proj.b")?;
        let w = g.reshape(pooling, &[b, 1, t])?;
        let z = g.bmm(w, proj)?;
        let z = g.reshape(z, &[b, c.d_latent])?;
        Ok(EncodeVars { embeddings, pooling, z, attention })
    }

    /// Decoder forward pass; returns logits `[B, T, V]`.
    pub fn decode_graph(&self, g: &mut Graph, z: Var, mode: Mode, stats: &mut Vec<BnStats>) -> Result<Var> {
        let c = &self.config;
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != c.d_latent {
            return Err(Error::shape("decode", format!("latent batch {zs:?}, expected [B, {}]", c.d_latent)));
        }
        let b = zs[0];
        let mut x = self.linear(g, z, "dec.in.w", "dec.in.b")?;
        x = g.reshape(x, &[b, c.max_len, c.decoder_channels])?;
        for i in 0..4 {
            let (w, bias) = (g.param(&self.params, &format!("dec.conv{i}.w"))?, g.param(&self.params, &format!("dec.conv{i}.b"))?);
            x = g.conv1d(x, w, bias)?;
            if i == 3 {
                break;
            }
            let gamma = g.param(&self.params, &format!("dec.bn{i}.gamma"))?;
            let beta = g.param(&self.params, &format!("dec.bn{i}.beta"))?;
            x = match mode {
                Mode::Train => {
                    let (y, mean, var) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                    stats.push(BnStats { layer: i, mean, var });
                    y
                }
                Mode::Eval => {
                    let mean = self.params.buffer(&format!("dec.bn{i}.running_mean"))?.data().to_vec();
                    let var = self.params.buffer(&format!("dec.bn{i}.running_var"))?.data().to_vec();
                    g.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)?
                }
            };
            x = g.relu(x)?;
        }
        Ok(x)
    }

    /// Fitness head; returns predictions `[B]`.
    pub fn fitness_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.config.d_latent {
            return Err(Error::shape("predict_fitness", format!("latent batch {zs:?}")));
        }
        let h = self.linear(g, z, "head.w1", "head.b1")?;
        let h = g.softplus(h)?;
        let y = self.linear(g, h, "head.w2", "head.b2")?;
        g.reshape(y, &[zs[0]])
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[BnStats]) -> Result<()> {
        for s in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("dec.bn{}.{suffix}", s.layer);
                let cur = self.params.buffer(&name)?;
                let next: Vec<f64> =
                    cur.data().iter().zip(batch).map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b).collect();
                self.params.set_buffer(&name, Tensor::vector(&next))?;
            }
        }
        Ok(())
    }

    // ---- inference helpers (eval mode, no parameter gradients) -----------

    pub fn encode(&self, batch: &[&EncodedSequence]) -> Result<Vec<EncodeOutput>> {
        let mut g = Graph::frozen();
        let vars = self.encode_graph(&mut g, batch)?;
        let c = &self.config;
        let (t, d, nh) = (c.max_len, c.d_embed, c.n_heads);
        let emb = g.value(vars.embeddings).data();
        let pool = g.value(vars.pooling).data();
        let z = g.value(vars.z).data();
        let mut out = Vec::with_capacity(batch.len());
        for bi in 0..batch.len() {
            let mut attn = Vec::with_capacity(c.n_layers * nh * t * t);
            for a in &vars.attention {
                attn.extend_from_slice(&g.value(*a).data()[bi * nh * t * t..(bi + 1) * nh * t * t]);
            }
            out.push(EncodeOutput {
                embeddings: Tensor::new(vec![t, d], emb[bi * t * d..(bi + 1) * t * d].to_vec())?,
                pooling: pool[bi * t..(bi + 1) * t].to_vec(),
                z: z[bi * c.d_latent..(bi + 1) * c.d_latent].to_vec(),
                attention: Tensor::new(vec![c.n_layers, nh, t, t], attn)?,
            });
        }
        Ok(out)
    }

    /// Latent codes only, processed in chunks.
    pub fn encode_z(&self, batch: &[&EncodedSequence]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(128) {
            let mut g = Graph::frozen();
            let vars = self.encode_graph(&mut g, chunk)?;
            out.extend(g.value(vars.z).data().chunks(self.config.d_latent).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    fn latent_tensor(&self, z: &[Vec<f64>]) -> Result<Tensor> {
        let d = self.config.d_latent;
        if z.is_empty() || z.iter().any(|r| r.len() != d) {
            return Err(Error::shape("latent", format!("expected nonempty rows of width {d}")));
        }
        if z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "latent input" });
        }
        Tensor::from_rows(z)
    }

    /// Eval-mode logits `[B, T, V]`.
    pub fn decode(&self, z: &[Vec<f64>]) -> Result<Tensor> {
        let mut g = Graph::frozen();
        let zv = g.constant(self.latent_tensor(z)?);
        let logits = self.decode_graph(&mut g, zv, Mode::Eval, &mut Vec::new())?;
        Ok(g.value(logits).clone())
    }

    /// Argmax token sequences (PAD included) for each latent point.
    pub fn decode_tokens(&self, z: &[Vec<f64>]) -> Result<Vec<Vec<usize>>> {
        let logits = self.decode(z)?;
        let (t, v) = (self.config.max_len, self.config.vocab_size);
        Ok((0..z.len())
            .map(|b| {
                (0..t)
                    .map(|p| {
                        let row = &logits.data()[(b * t + p) * v..(b * t + p + 1) * v];
                        argmax_row(row)
                    })
                    .collect()
            })
            .collect())
    }

    /// Decoded residue strings, restricted to the first `length` positions and
    /// to residue tokens so the result is always a valid sequence.
    pub fn decode_sequences(&self, z: &[Vec<f64>], length: usize) -> Result<Vec<String>> {
        self.decode_sequences_over(z, length, &AMINO_ACIDS)
    }

    /// Argmax decoding restricted to `symbols`, ties to the earliest symbol.
    pub fn decode_sequences_over(&self, z: &[Vec<f64>], length: usize, symbols: &[char]) -> Result<Vec<String>> {
        let alphabet = Alphabet::protein();
        let tokens = symbols
            .iter()
            .map(|&c| alphabet.index(c).filter(|t| alphabet.residue_tokens().contains(t)).ok_or(Error::UnknownSymbol { row: 0, symbol: c }))
            .collect::<Result<Vec<usize>>>()?;
        if tokens.is_empty() {
            return Err(Error::Config("decoding needs at least one symbol".into()));
        }
        let logits = self.decode(z)?;
        let (t, v) = (self.config.max_len, self.config.vocab_size);
        Ok((0..z.len())
            .map(|b| {
                (0..length.min(t))
                    .map(|p| {
                        let row = &logits.data()[(b * t + p) * v..(b * t + p + 1) * v];
                        let best = (0..tokens.len()).fold(0, |k, i| if row[tokens[i]] > row[tokens[k]] { i } else { k });
                        symbols[best]
                    })
                    .collect()
            })
            .collect())
    }

    pub fn predict_fitness(&self, z: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut g = Graph::frozen();
        let zv = g.constant(self.latent_tensor(z)?);
        let y = self.fitness_graph(&mut g, zv)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Predicted fitness and its gradient with respect to one latent point.
    pub fn fitness_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::frozen();
        let zv = g.leaf(self.latent_tensor(&[z.to_vec()])?.with_grad());
        let y = self.fitness_graph(&mut g, zv)?;
        let s = g.sum(y)?;
        let value = g.value(s).item();
        let grads = g.backward(s)?;
        let grad = grads.get(zv).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; z.len()]);
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "fitness gradient" });
        }
        Ok((value, grad))
    }

    /// Sequence-level prediction `h(f(x))`.
    pub fn predict_sequences(&self, batch: &[&EncodedSequence]) -> Result<Vec<f64>> {
        let z = self.encode_z(batch)?;
        self.predict_fitness(&z)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
