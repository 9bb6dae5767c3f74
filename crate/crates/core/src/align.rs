//! Contrastive alignment between the image-side and token-side class
//! embeddings: cosine similarity over flattened `N x D` samples, batch
//! InfoNCE with a learnable temperature, and the symmetric sum of both directions.

use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Graph, Group, InitRule, ParamId, ParamStore, Var};

/// Added to vector norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Starting temperature, stored as `ln(0.07)`.
pub const INIT_TAU: f64 = 0.07;

/// Cosine similarity of two equally shaped arrays, flattened.
pub fn pair_similarity(a: &DenseArray, b: &DenseArray) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok(dot / ((a.sum_squares().sqrt() + NORM_EPS) * (b.sum_squares().sqrt() + NORM_EPS)))
}

/// True when any row of `x` has (numerically) zero norm, i.e. the guard was needed.
pub fn has_degenerate_rows(x: &DenseArray) -> bool {
    (0..x.rows()).any(|i| x.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt() < NORM_EPS)
}

#[derive(Debug, Clone)]
pub struct Temperature {
    pub log_tau: ParamId,
}

impl Temperature {
    pub fn new(store: &mut ParamStore) -> Result<Self> {
        let init = INIT_TAU.ln();
        let log_tau = store.add("align.log_tau", Group::Head, DenseArray::scalar(init), InitRule::Constant(init), false)?;
        Ok(Self { log_tau })
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.value(self.log_tau).data()[0].exp()
    }
}

/// Temperature-scaled similarity logits `S[i, j] = cos(v_i, l_j) / tau` for
/// `B x K` sides (one flattened sample per row).
pub fn similarity_logits(g: &mut Graph, v: Var, l: Var, log_tau: Var) -> Result<Var> {
    if g.value(v).shape() != g.value(l).shape() {
        return Err(Error::DimMismatch(format!(
            "vision side {:?} vs language side {:?}",
            g.value(v).shape(),
            g.value(l).shape()
        )));
    }
    if g.value(v).rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let vn = g.l2_normalize_rows(v, NORM_EPS);
    let ln = g.l2_normalize_rows(l, NORM_EPS);
    let lt = g.transpose(ln);
    let s = g.matmul(vn, lt)?;
    let neg = g.scale(log_tau, -1.0);
    let inv_tau = g.exp(neg);
    g.mul_scalar(s, inv_tau)
}

/// `-(1/B) sum_i log softmax_j(S[i, j])[i]` for vision rows against language rows.
pub fn info_nce(g: &mut Graph, v: Var, l: Var, log_tau: Var) -> Result<Var> {
    let s = similarity_logits(g, v, l, log_tau)?;
    g.cross_entropy_diag(s)
}

/// Both directions, sharing one logit matrix: `CE(S) + CE(S^T)`.
pub fn align_loss(g: &mut Graph, v: Var, l: Var, log_tau: Var) -> Result<Var> {
    let s = similarity_logits(g, v, l, log_tau)?;
    let a = g.cross_entropy_diag(s)?;
    let st = g.transpose(s);
    let b = g.cross_entropy_diag(st)?;
    g.add(a, b)
}

/// Stack per-sample `N x D` sides into `B x (N * D)`.
pub fn stack_samples(samples: &[DenseArray]) -> Result<DenseArray> {
    let first = samples.first().ok_or(Error::EmptyBatch)?;
    let mut d = Vec::with_capacity(samples.len() * first.len());
    for s in samples {
        if s.shape() != first.shape() {
            return Err(Error::DimMismatch(format!("{:?} vs {:?}", s.shape(), first.shape())));
        }
        d.extend_from_slice(s.data());
    }
    DenseArray::matrix(samples.len(), first.len(), d)
}

fn eval_scalar(v: &DenseArray, l: &DenseArray, tau: f64, f: fn(&mut Graph, Var, Var, Var) -> Result<Var>) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (vv, lv) = (g.input(v.clone()), g.input(l.clone()));
    let t = g.input(DenseArray::scalar(tau.ln()));
    let out = f(&mut g, vv, lv, t)?;
    Ok(g.scalar(out))
}

/// [`info_nce`] on plain `B x K` arrays.
pub fn info_nce_value(v: &DenseArray, l: &DenseArray, tau: f64) -> Result<f64> {
    eval_scalar(v, l, tau, info_nce)
}

/// [`align_loss`] on plain `B x K` arrays.
pub fn align_loss_value(v: &DenseArray, l: &DenseArray, tau: f64) -> Result<f64> {
    eval_scalar(v, l, tau, align_loss)
}

/// Fraction of rows `i` whose most similar language row is `i`; ties go to the lowest index.
pub fn retrieval_accuracy(v: &DenseArray, l: &DenseArray) -> Result<f64> {
    if v.shape() != l.shape() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", v.shape(), l.shape())));
    }
    let b = v.rows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let norm = |x: &DenseArray| {
        let mut out = x.clone();
        let c = x.cols();
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt() + NORM_EPS;
            row.iter_mut().for_each(|a| *a /= n);
        }
        out
    };
    let (vn, ln) = (norm(v), norm(l));
    let mut hits = 0;
    for i in 0..b {
        let mut best = (f64::NEG_INFINITY, 0);
        for j in 0..b {
            let s: f64 = vn.row_slice(i).iter().zip(ln.row_slice(j)).map(|(a, c)| a * c).sum();
            if s > best.0 {
                best = (s, j);
            }
        }
        hits += usize::from(best.1 == i);
    }
    Ok(hits as f64 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_cases() {
        let a = DenseArray::row(&[1.0, 0.0]);
        let b = DenseArray::row(&[1.0, 1.0]);
        assert!((pair_similarity(&a, &b).unwrap() - 0.5f64.sqrt()).abs() < 1e-9);
        let c = DenseArray::row(&[3.0, -2.0]);
        let neg = DenseArray::row(&[-3.0, 2.0]);
        assert!((pair_similarity(&c, &c).unwrap() - 1.0).abs() < 1e-9);
        assert!((pair_similarity(&c, &neg).unwrap() + 1.0).abs() < 1e-9);
        assert_eq!(pair_similarity(&DenseArray::zeros(&[1, 2]), &c).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_batch() {
        let mut eye = DenseArray::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let expected = -(1f64.exp() / (1f64.exp() + 3.0)).ln();
        assert!((info_nce_value(&eye, &eye, 1.0).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 0.743668).abs() < 1e-6);
        assert!((align_loss_value(&eye, &eye, 1.0).unwrap() - 2.0 * expected).abs() < 1e-9);
    }

    #[test]
    fn empty_batch_and_ties() {
        assert!(matches!(stack_samples(&[]), Err(Error::EmptyBatch)));
        let v = DenseArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let l = DenseArray::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(retrieval_accuracy(&v, &l).unwrap(), 1.0 / 3.0);
        assert_eq!(retrieval_accuracy(&v, &v).unwrap(), 1.0);
    }
}
