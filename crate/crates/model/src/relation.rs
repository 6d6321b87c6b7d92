//! Encoder-decoder relation module over the 2N RoI tokens.

use candle_core::Tensor;
use candle_nn::{Linear, Module, VarBuilder};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, MultiHeadAttention};

struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    fn new(d: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(FeedForward {
            fc1: candle_nn::linear(d, hidden, vb.pp("fc1"))?,
            fc2: candle_nn::linear(hidden, d, vb.pp("fc2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.relu()?)?)
    }
}

pub struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(d: usize, heads: usize, ffn: usize, vb: VarBuilder) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(d, heads, vb.pp("attn"))?,
            norm1: LayerNorm::new(d, vb.pp("norm1"))?,
            ffn: FeedForward::new(d, ffn, vb.pp("ffn"))?,
            norm2: LayerNorm::new(d, vb.pp("norm2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (a, w) = self.attn.forward(x, x)?;
        let x = self.norm1.forward(&(x + a)?)?;
        let x = self.norm2.forward(&(&x + self.ffn.forward(&x)?)?)?;
        Ok((x, w))
    }
}

pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(d: usize, heads: usize, ffn: usize, vb: VarBuilder) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(d, heads, vb.pp("self_attn"))?,
            norm1: LayerNorm::new(d, vb.pp("norm1"))?,
            cross_attn: MultiHeadAttention::new(d, heads, vb.pp("cross_attn"))?,
            norm2: LayerNorm::new(d, vb.pp("norm2"))?,
            ffn: FeedForward::new(d, ffn, vb.pp("ffn"))?,
            norm3: LayerNorm::new(d, vb.pp("norm3"))?,
        })
    }

    pub fn forward(&self, q: &Tensor, memory: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (a, w_self) = self.self_attn.forward(q, q)?;
        let x = self.norm1.forward(&(q + a)?)?;
        let (c, w_cross) = self.cross_attn.forward(&x, memory)?;
        let x = self.norm2.forward(&(&x + c)?)?;
        let x = self.norm3.forward(&(&x + self.ffn.forward(&x)?)?)?;
        Ok((x, w_self, w_cross))
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// (B, 2N, d), ordered left0, right0, left1, ...
    pub tokens: Tensor,
    /// (B, N, d), mean of each AU's two tokens.
    pub per_au: Tensor,
    /// Encoder self, decoder self and decoder cross attention, each (B, heads, 2N, 2N).
    pub weights: [Tensor; 3],
}

pub struct RelationTransformer {
    encoder: EncoderLayer,
    decoder: DecoderLayer,
    /// (d, N), one column per AU.
    indicators: Tensor,
}

impl RelationTransformer {
    pub fn new(d: usize, heads: usize, n: usize, ffn_mult: usize, vb: VarBuilder) -> Result<Self> {
        Ok(RelationTransformer {
            encoder: EncoderLayer::new(d, heads, ffn_mult * d, vb.pp("encoder"))?,
            decoder: DecoderLayer::new(d, heads, ffn_mult * d, vb.pp("decoder"))?,
            indicators: vb.get_with_hints((d, n), "indicators.embedding", candle_nn::Init::Const(0.0))?,
        })
    }

    pub fn indicators(&self) -> &Tensor {
        &self.indicators
    }

    pub fn encode(&self, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        self.encoder.forward(tokens)
    }

    /// Adds indicator column i to queries 2i and 2i+1.
    pub fn with_indicators(queries: &Tensor, indicators: &Tensor) -> Result<Tensor> {
        let (d, n) = indicators.dims2()?;
        let (_, t, dq) = queries.dims3()?;
        if t != 2 * n || dq != d {
            return Err(Error::Shape(format!(
                "queries {:?} do not match {n} indicators of width {d}",
                queries.dims()
            )));
        }
        let per_token = indicators
            .t()?
            .unsqueeze(1)?
            .broadcast_as((n, 2, d))?
            .reshape((2 * n, d))?;
        Ok(queries.broadcast_add(&per_token.unsqueeze(0)?)?)
    }

    pub fn decode(&self, memory: &Tensor, queries: &Tensor, indicators: &Tensor, enc_weights: Tensor) -> Result<AttentionOutput> {
        let q = Self::with_indicators(queries, indicators)?;
        let (tokens, w_self, w_cross) = self.decoder.forward(&q, memory)?;
        let (b, t, d) = tokens.dims3()?;
        let per_au = tokens.reshape((b, t / 2, 2, d))?.mean(2)?;
        Ok(AttentionOutput {
            tokens,
            per_au,
            weights: [enc_weights, w_self, w_cross],
        })
    }

    /// `tokens`: (B, 2N, d) pooled RoI features.
    pub fn forward(&self, tokens: &Tensor) -> Result<AttentionOutput> {
        let (memory, w) = self.encode(tokens)?;
        self.decode(&memory, tokens, &self.indicators, w)
    }

    pub fn indicator_columns(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .indicators
            .t()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec2()?)
    }

    pub fn indicator_similarity(&self) -> Result<Vec<Vec<f64>>> {
        cosine_similarity(&self.indicator_columns()?)
    }
}

/// Cosine similarity between the given vectors (one per AU).
pub fn cosine_similarity(columns: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let norms: Vec<f64> = columns.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::ZeroNorm(i));
    }
    let n = columns.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        out[i][i] = 1.0;
        for j in 0..i {
            let dot: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
            let s = dot / (norms[i] * norms[j]);
            out[i][j] = s;
            out[j][i] = s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    fn toy(d: usize, n: usize) -> (VarMap, RelationTransformer) {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F64, &Device::Cpu);
        let t = RelationTransformer::new(d, 2, n, 2, vb).unwrap();
        crate::nn::reseed(&vm, 5).unwrap();
        (vm, t)
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn shapes_and_pair_means() {
        let (_, t) = toy(8, 3);
        let x = Tensor::randn(0.0f64, 1.0, (2, 6, 8), &Device::Cpu).unwrap();
        let out = t.forward(&x).unwrap();
        assert_eq!(out.tokens.dims(), &[2, 6, 8]);
        assert_eq!(out.per_au.dims(), &[2, 3, 8]);
        for i in 0..3 {
            let mean = ((out.tokens.narrow(1, 2 * i, 1).unwrap() + out.tokens.narrow(1, 2 * i + 1, 1).unwrap()).unwrap() / 2.0).unwrap();
            let d = (mean.squeeze(1).unwrap() - out.per_au.narrow(1, i, 1).unwrap().squeeze(1).unwrap()).unwrap();
            assert!(max_abs(&d) < 1e-12);
        }
    }

    #[test]
    fn single_distinct_token_stands_out() {
        let (_, t) = toy(8, 3);
        let base = Tensor::ones((1, 6, 8), DType::F64, &Device::Cpu).unwrap();
        let bump = Tensor::from_vec((0..48).map(|i| if i < 8 { (i as f64).sin() } else { 0.0 }).collect::<Vec<_>>(), (1, 6, 8), &Device::Cpu).unwrap();
        let (y, _) = t.encode(&(base + bump).unwrap()).unwrap();
        let y = y.squeeze(0).unwrap();
        let d01 = max_abs(&(y.get(0).unwrap() - y.get(1).unwrap()).unwrap());
        let d12 = max_abs(&(y.get(1).unwrap() - y.get(2).unwrap()).unwrap());
        assert!(d01 > 1e-3 && d12 < 1e-12);
    }

    #[test]
    fn indicators_separate_zero_queries() {
        let (_, t) = toy(8, 3);
        let z = Tensor::zeros((1, 6, 8), DType::F64, &Device::Cpu).unwrap();
        let (m, w) = t.encode(&z).unwrap();
        let out = t.decode(&m, &z, t.indicators(), w).unwrap();
        let p = out.per_au.squeeze(0).unwrap();
        assert!(max_abs(&(p.get(0).unwrap() - p.get(1).unwrap()).unwrap()) > 1e-6);

        let zero_ind = t.indicators().zeros_like().unwrap();
        let (m, w) = t.encode(&z).unwrap();
        let out = t.decode(&m, &z, &zero_ind, w).unwrap();
        let tok = out.tokens.squeeze(0).unwrap();
        for i in 1..6 {
            assert!(max_abs(&(tok.get(0).unwrap() - tok.get(i).unwrap()).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn similarity_properties() {
        let s = cosine_similarity(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(s[0][0], 1.0);
        assert_eq!(s[0][1], 0.0);
        assert!((s[0][2] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(s[2][0], s[0][2]);
        assert!(matches!(cosine_similarity(&[vec![1.0], vec![0.0]]), Err(Error::ZeroNorm(1))));
        let (_, t) = toy(8, 4);
        let m = t.indicator_similarity().unwrap();
        for i in 0..4 {
            assert_eq!(m[i][i], 1.0);
            for j in 0..4 {
                assert!((m[i][j] - m[j][i]).abs() < 1e-7);
            }
        }
    }
}
