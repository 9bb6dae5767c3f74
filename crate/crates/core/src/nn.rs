//! Building blocks shared by both encoders and the selection block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Graph, Group, InitRule, ParamId, ParamStore, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, group: Group) -> Result<Self> {
        Self::with_init(
            store,
            name,
            in_dim,
            out_dim,
            group,
            InitRule::Xavier {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        )
    }

    /// Patch-embedding style map, initialized like a 1-D convolution.
    pub fn conv_like(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, group: Group) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, group, InitRule::Kaiming { fan_in: in_dim })
    }

    fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: Group,
        init: InitRule,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), group, DenseArray::zeros(&[in_dim, out_dim]), init, true)?;
        let bias = Some(store.add(
            format!("{name}.bias"),
            group,
            DenseArray::zeros(&[1, out_dim]),
            InitRule::Constant(0.0),
            true,
        )?);
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Weight-only map; the bias slot stays empty.
    pub fn without_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, group: Group) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            DenseArray::zeros(&[in_dim, out_dim]),
            InitRule::Xavier {
                fan_in: in_dim,
                fan_out: out_dim,
            },
            true,
        )?;
        Ok(Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    /// Row-wise `x W + b`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.in_dim {
            return Err(Error::Config(format!(
                "linear expects {} inputs, got {}",
                self.in_dim,
                g.value(x).cols()
            )));
        }
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_rows_cyclic(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: Group) -> Result<Self> {
        let gamma = store.add(
            format!("{name}.gamma"),
            group,
            DenseArray::filled(&[1, dim], 1.0),
            InitRule::Constant(1.0),
            false,
        )?;
        let beta = store.add(
            format!("{name}.beta"),
            group,
            DenseArray::zeros(&[1, dim]),
            InitRule::Constant(0.0),
            false,
        )?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, group: Group) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, group)?,
            // a key bias only shifts every logit of a query equally, so it has no gradient
            key: Linear::without_bias(store, &format!("{name}.k"), dim, dim, group)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim, group)?,
            output: Linear::new(store, &format!("{name}.o"), dim, dim, group)?,
            heads,
        })
    }

    /// Attend `groups` query blocks of `q_len` rows to matching key/value
    /// blocks of `kv_len` rows. Returns the attention node alongside the output
    /// so callers can inspect the weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        xq: Var,
        xkv: Var,
        groups: usize,
        q_len: usize,
        kv_len: usize,
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(g, xq)?;
        let k = self.key.forward(g, xkv)?;
        let v = self.value.forward(g, xkv)?;
        let attn = g.attention(q, k, v, self.heads, groups, q_len, kv_len)?;
        let out = self.output.forward(g, attn)?;
        Ok((out, attn))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
        group: Group,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, group)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, group)?,
            act,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = self.act.apply(g, h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub act: Activation,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, group: Group) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.dim, group)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads, group)?,
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.dim, group)?,
            ffn: FeedForward::new(
                store,
                &format!("{name}.ffn"),
                cfg.dim,
                cfg.dim * cfg.ffn_ratio,
                cfg.act,
                group,
            )?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, groups: usize, seq_len: usize) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let (a, _) = self.attn.forward(g, h, h, groups, seq_len, seq_len)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

/// Stack of [`EncoderBlock`]s over `groups` independent sequences stored as
/// consecutive row blocks.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, group: Group) -> Result<Self> {
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(store, &format!("{name}.block{i}"), &cfg, group))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, cfg })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, groups: usize, seq_len: usize) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, x, groups, seq_len)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseArray {
        let n = shape.iter().product();
        DenseArray::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mha_rejects_indivisible_dim() {
        let mut s = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut s, "a", 10, 4, Group::Head).is_err());
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut s = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut s, "a", 8, 2, Group::Head).unwrap();
        s.initialize(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random(&mut rng, &[2, 8]);
        let row = random(&mut rng, &[1, 8]);
        let kv = DenseArray::matrix(5, 8, row.data().repeat(5)).unwrap();
        let mut g = Graph::new(&s);
        let (q, kv) = (g.input(q), g.input(kv));
        let (_, attn) = mha.forward(&mut g, q, kv, 1, 2, 5).unwrap();
        for w in g.attention_weights(attn).unwrap() {
            assert!((w - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn orthogonal_query_gives_uniform_weights() {
        // identity projections, one head, query orthogonal to every key
        let mut s = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut s, "a", 4, 1, Group::Head).unwrap();
        for lin in [&mha.query, &mha.key, &mha.value, &mha.output] {
            let w = s.value_mut(lin.weight);
            for i in 0..4 {
                w.data_mut()[i * 4 + i] = 1.0;
            }
        }
        let mut g = Graph::new(&s);
        let q = g.input(DenseArray::matrix(1, 4, vec![1., 0., 0., 0.]).unwrap());
        let kv = g.input(DenseArray::matrix(3, 4, vec![0., 1., 0., 0., 0., 0., 2., 0., 0., 3., 0., 1.]).unwrap());
        let (out, attn) = mha.forward(&mut g, q, kv, 1, 1, 3).unwrap();
        for w in g.attention_weights(attn).unwrap() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let expect = [0.0, 4.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0];
        for (a, b) in g.value(out).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_block_gradients() {
        for seed in 0..3 {
            let mut s = ParamStore::new();
            let cfg = EncoderConfig {
                dim: 8,
                depth: 1,
                heads: 2,
                ffn_ratio: 2,
                act: Activation::Gelu,
            };
            let enc = Encoder::new(&mut s, "enc", cfg, Group::Encoder).unwrap();
            s.initialize(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x = random(&mut rng, &[6, 8]);
            let w = random(&mut rng, &[6, 8]);
            let rep = grad_check(
                &s,
                |g| {
                    let xv = g.input(x.clone());
                    let y = enc.forward(g, xv, 2, 3)?;
                    let wv = g.input(w.clone());
                    let p = g.mul(y, wv)?;
                    Ok(g.sum(p))
                },
                1e-5,
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        }
    }
}
