//! MoLE and Gated MoLE expert blocks.
//!
//! Training mode computes each token's experts as `FFNₙ(e_id)` from the raw
//! token embedding. Inference mode reads the same vectors from a per-id value
//! table filled by [`reparameterize`].

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{swishglu_ffn, swishglu_ffn_on_tape, FfnParams};
use crate::numerics::kernels::{self, dot, matvec};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{join, trunc_normal, Params};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct MoleBlockParams<T> {
    /// Router vectors `r_n` as rows, `[N, d]`.
    pub router: T,
    /// Gate vector `u` as `[1, d]`; present for Gated MoLE.
    pub gate: Option<T>,
    /// FFN experts with output width `d`; empty when `values` is used.
    pub experts: Vec<FfnParams<T>>,
    /// Free per-id values `[|V|, N·d]` trained directly instead of `experts`.
    pub values: Option<T>,
}

impl MoleBlockParams<Tensor> {
    pub fn init(rng: &mut impl Rng, cfg: &ModelConfig, gated: bool, std: f64) -> Self {
        let (d, n) = (cfg.d_model, cfg.n_experts);
        let router = trunc_normal(rng, &[n, d], std);
        let gate = gated.then(|| trunc_normal(rng, &[1, d], std));
        let (experts, values) = if cfg.free_values {
            (Vec::new(), Some(trunc_normal(rng, &[cfg.vocab_size, n * d], std)))
        } else {
            let experts = (0..n).map(|_| FfnParams::init(rng, d, cfg.d_ff, d, std)).collect();
            (experts, None)
        };
        Self { router, gate, experts, values }
    }

    pub fn n_experts(&self) -> usize {
        self.router.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.router.shape()[1]
    }
}

impl<T: 'static> Params<T> for MoleBlockParams<T> {
    type With<U> = MoleBlockParams<U>;

    fn map_ref<U>(&self, f: &mut impl FnMut(&T) -> U) -> MoleBlockParams<U> {
        MoleBlockParams {
            router: f(&self.router),
            gate: self.gate.as_ref().map(&mut *f),
            experts: self.experts.map_ref(f),
            values: self.values.as_ref().map(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(join(prefix, "router"), &self.router);
        if let Some(g) = &self.gate {
            f(join(prefix, "gate"), g);
        }
        self.experts.visit(&join(prefix, "experts"), f);
        if let Some(v) = &self.values {
            f(join(prefix, "values"), v);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(join(prefix, "router"), &mut self.router);
        if let Some(g) = &mut self.gate {
            f(join(prefix, "gate"), g);
        }
        self.experts.visit_mut(&join(prefix, "experts"), f);
        if let Some(v) = &mut self.values {
            f(join(prefix, "values"), v);
        }
    }
}

/// Reparameterized values `v_{i,n}` for one layer, stored id-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MoleValueTable {
    vocab: usize,
    n_experts: usize,
    d: usize,
    data: Vec<f64>,
}

impl MoleValueTable {
    pub fn new(vocab: usize, n_experts: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != vocab * n_experts * d {
            return Err(Error::Dimension(format!(
                "value table of {} entries for {vocab}×{n_experts}×{d}",
                data.len()
            )));
        }
        Ok(Self { vocab, n_experts, d, data })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// The `N·d` values of `id`, expert-major.
    pub fn lookup(&self, id: usize) -> Result<&[f64]> {
        if id >= self.vocab {
            return Err(Error::Lookup(format!("id {id} out of range for vocabulary {}", self.vocab)));
        }
        let w = self.n_experts * self.d;
        Ok(&self.data[id * w..(id + 1) * w])
    }
}

/// `softmax_n(hᵀ r_n)`.
pub fn routing(h: &[f64], router: &Tensor) -> Vec<f64> {
    kernels::softmax_slice(&matvec(router, h))
}

/// `sigmoid(hᵀ u)`.
pub fn gate_score(h: &[f64], gate: &Tensor) -> f64 {
    kernels::sigmoid(dot(h, gate.data()))
}

/// `[g·]Σ s_n v_n` for one token given its `N·d` looked-up values.
pub fn expert_term(h: &[f64], values: &[f64], block: &MoleBlockParams<Tensor>) -> Vec<f64> {
    let d = h.len();
    let s = routing(h, &block.router);
    let g = block.gate.as_ref().map_or(1.0, |u| gate_score(h, u));
    let mut out = vec![0.0; d];
    for (n, sn) in s.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(&values[n * d..(n + 1) * d]) {
            *o += g * sn * v;
        }
    }
    out
}

/// Inference-mode block: `h + FFN(h) + [g·]Σ s_n v_{id,n}`.
///
/// The gate applies when the block carries one (Gated MoLE).
pub fn infer_forward(
    h: &[f64],
    id: usize,
    table: &MoleValueTable,
    ffn: &FfnParams<Tensor>,
    block: &MoleBlockParams<Tensor>,
) -> Result<Vec<f64>> {
    let values = table.lookup(id)?;
    let f = swishglu_ffn(h, ffn);
    let e = expert_term(h, values, block);
    Ok(h.iter().zip(f).zip(e).map(|((a, b), c)| a + b + c).collect())
}

/// `[FFN_1(e), …, FFN_N(e)]` flattened, i.e. the values stored for an id.
pub fn expert_values(e: &[f64], block: &MoleBlockParams<Tensor>) -> Vec<f64> {
    block.experts.iter().flat_map(|ffn| swishglu_ffn(e, ffn)).collect()
}

/// Freezes `FFNₙ(e_i)` (or the free values) into a lookup table over the vocabulary.
pub fn reparameterize(block: &MoleBlockParams<Tensor>, embeddings: &Tensor) -> Result<MoleValueTable> {
    let (vocab, d) = embeddings.dims2()?;
    let n = block.n_experts();
    let data = match &block.values {
        Some(v) => v.data().to_vec(),
        None => (0..vocab).flat_map(|i| expert_values(embeddings.row_slice(i), block)).collect(),
    };
    MoleValueTable::new(vocab, n, d, data)
}

/// Training-mode expert term for a `[s, d]` block of FFN inputs and their ids.
pub fn train_expert_term(
    tape: &mut Tape,
    h: Var,
    ids: &[usize],
    embeddings: Var,
    block: &MoleBlockParams<Var>,
) -> Result<Var> {
    let scores = tape.matmul_nt(h, block.router)?;
    let scores = tape.softmax(scores)?;
    let n = tape.value(block.router).shape()[0];
    let d = tape.value(h).dims2()?.1;

    let per_expert: Vec<Var> = match block.values {
        Some(table) => {
            let rows = tape.gather_rows(table, ids)?;
            (0..n).map(|i| tape.slice_cols(rows, i * d, d)).collect::<Result<_>>()?
        }
        None => {
            let e = tape.gather_rows(embeddings, ids)?;
            block
                .experts
                .iter()
                .map(|ffn| swishglu_ffn_on_tape(tape, e, ffn))
                .collect::<Result<_>>()?
        }
    };

    let mut acc: Option<Var> = None;
    for (i, v) in per_expert.into_iter().enumerate() {
        let s = tape.slice_cols(scores, i, 1)?;
        let term = tape.mul(v, s)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let mut out = acc.ok_or_else(|| Error::Contract("MoLE block has no experts".into()))?;
    if let Some(u) = block.gate {
        let g = tape.matmul_nt(h, u)?;
        let g = tape.sigmoid(g);
        out = tape.mul(out, g)?;
    }
    Ok(out)
}

/// Training-mode block: `h + FFN(h) + [g·]Σ s_n FFNₙ(e_id)`.
pub fn train_forward(
    tape: &mut Tape,
    h: Var,
    ids: &[usize],
    embeddings: Var,
    ffn: &FfnParams<Var>,
    block: &MoleBlockParams<Var>,
) -> Result<Var> {
    let rows = tape.value(embeddings).dims2()?.0;
    if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
        return Err(Error::Lookup(format!("id {bad} out of range for vocabulary {rows}")));
    }
    let f = swishglu_ffn_on_tape(tape, h, ffn)?;
    let e = train_expert_term(tape, h, ids, embeddings, block)?;
    let y = tape.add(h, f)?;
    tape.add(y, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelKind;
    use crate::numerics::{grad_check, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(n: usize, d: usize, vocab: usize) -> ModelConfig {
        ModelConfig {
            n_experts: n,
            d_model: d,
            d_ff: 2 * d,
            vocab_size: vocab,
            ..ModelConfig::tiny(ModelKind::Mole)
        }
    }

    fn rvec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    fn train_rows(
        h: &Tensor,
        ids: &[usize],
        emb: &Tensor,
        ffn: &FfnParams<Tensor>,
        block: &MoleBlockParams<Tensor>,
    ) -> Tensor {
        let mut tape = Tape::new();
        let hv = tape.leaf(h.clone());
        let ev = tape.leaf(emb.clone());
        let fv = ffn.map_ref(&mut |t| tape.leaf(t.clone()));
        let bv = block.map_ref(&mut |t| tape.leaf(t.clone()));
        let y = train_forward(&mut tape, hv, ids, ev, &fv, &bv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_routers_give_uniform_scores() {
        let s = routing(&[1.0, -2.0, 3.0], &Tensor::zeros(&[4, 3]));
        assert!(s.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let s = routing(&[1.0, -2.0, 3.0], &Tensor::full(&[1, 3], 0.7));
        assert_eq!(s, vec![1.0]);
    }

    #[test]
    fn routing_argmax_follows_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let router = Tensor::from_fn(&[5, 6], |_| rng.random::<f64>() - 0.5);
            let h = rvec(&mut rng, 6);
            let logits = matvec(&router, &h);
            let s = routing(&h, &router);
            let amax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
            assert_eq!(amax(&s), amax(&logits));
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_with_zero_routers_averages_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg(3, 4, 5);
        let mut block = MoleBlockParams::init(&mut rng, &c, false, 0.5);
        block.router = Tensor::zeros(&[3, 4]);
        let ffn = FfnParams::init(&mut rng, 4, 8, 4, 0.5);
        let emb = Tensor::from_fn(&[5, 4], |_| rng.random::<f64>() - 0.5);
        let table = reparameterize(&block, &emb).unwrap();
        let y = infer_forward(&[0.0; 4], 2, &table, &ffn, &block).unwrap();
        let v = table.lookup(2).unwrap();
        for j in 0..4 {
            let mean = (v[j] + v[4 + j] + v[8 + j]) / 3.0;
            assert!((y[j] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn single_expert_adds_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(1, 4, 3);
        let block = MoleBlockParams::init(&mut rng, &c, false, 0.5);
        let ffn = FfnParams::init(&mut rng, 4, 8, 4, 0.5);
        let emb = Tensor::from_fn(&[3, 4], |_| rng.random::<f64>() - 0.5);
        let table = reparameterize(&block, &emb).unwrap();
        let h = rvec(&mut rng, 4);
        let y = infer_forward(&h, 1, &table, &ffn, &block).unwrap();
        let f = swishglu_ffn(&h, &ffn);
        let v = table.lookup(1).unwrap();
        for j in 0..4 {
            assert!((y[j] - (h[j] + f[j] + v[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_id_is_lookup_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg(2, 4, 3);
        let block = MoleBlockParams::init(&mut rng, &c, false, 0.5);
        let ffn = FfnParams::init(&mut rng, 4, 8, 4, 0.5);
        let emb = Tensor::zeros(&[3, 4]);
        let table = reparameterize(&block, &emb).unwrap();
        assert!(matches!(infer_forward(&[0.0; 4], 3, &table, &ffn, &block), Err(Error::Lookup(_))));
    }

    #[test]
    fn inference_matches_training_after_reparameterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for gated in [false, true] {
            for free in [false, true] {
                let mut c = cfg(3, 8, 11);
                c.free_values = free;
                let block = MoleBlockParams::init(&mut rng, &c, gated, 0.4);
                let ffn = FfnParams::init(&mut rng, 8, 16, 8, 0.4);
                let emb = Tensor::from_fn(&[11, 8], |_| rng.random::<f64>() - 0.5);
                let table = reparameterize(&block, &emb).unwrap();
                let ids: Vec<usize> = (0..11).collect();
                let h = Tensor::from_fn(&[11, 8], |_| rng.random::<f64>() * 2.0 - 1.0);
                let train = train_rows(&h, &ids, &emb, &ffn, &block);
                for (r, &id) in ids.iter().enumerate() {
                    let y = infer_forward(h.row_slice(r), id, &table, &ffn, &block).unwrap();
                    assert!(relative_error(&y, train.row_slice(r)) <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_embedding_gives_no_expert_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = cfg(2, 4, 2);
        let block = MoleBlockParams::init(&mut rng, &c, false, 0.5);
        let ffn = FfnParams::init(&mut rng, 4, 8, 4, 0.5);
        let emb = Tensor::zeros(&[2, 4]);
        let h = Tensor::from_fn(&[1, 4], |_| rng.random::<f64>());
        let y = train_rows(&h, &[0], &emb, &ffn, &block);
        let f = swishglu_ffn(h.row_slice(0), &ffn);
        for j in 0..4 {
            assert_eq!(y.data()[j], h.data()[j] + f[j]);
        }
    }

    #[test]
    fn identical_embeddings_give_identical_expert_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = cfg(2, 4, 3);
        let block = MoleBlockParams::init(&mut rng, &c, true, 0.5);
        let ffn = FfnParams::init(&mut rng, 4, 8, 4, 0.5);
        let row = rvec(&mut rng, 4);
        let emb = Tensor::matrix(3, 4, [row.clone(), vec![0.3; 4], row].concat()).unwrap();
        let h = Tensor::row(rvec(&mut rng, 4));
        let h2 = Tensor::matrix(2, 4, [h.data(), h.data()].concat()).unwrap();
        let y = train_rows(&h2, &[0, 2], &emb, &ffn, &block);
        assert_eq!(y.row_slice(0), y.row_slice(1));
    }

    #[test]
    fn gate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = cfg(2, 4, 3);
        let mut gated = MoleBlockParams::init(&mut rng, &c, true, 0.5);
        gated.gate = Some(Tensor::zeros(&[1, 4]));
        let ungated = MoleBlockParams { gate: None, ..gated.clone() };
        let v = rvec(&mut rng, 8);
        let h = rvec(&mut rng, 4);
        let a = expert_term(&h, &v, &gated);
        let b = expert_term(&h, &v, &ungated);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, 0.5 * y);
        }
        // hᵀu = −25 drives the gate below 1e-9.
        let h = [1.0, 0.0, 0.0, 0.0];
        let u = Tensor::row(vec![-25.0, 0.3, 0.1, 0.2]);
        assert!(gate_score(&h, &u) < 1e-9);
        for x in [-30.0, -1.0, 0.0, 2.0, 30.0] {
            let g = gate_score(&[x], &Tensor::row(vec![1.0]));
            assert!(g > 0.0 && g < 1.0);
        }
    }

    #[test]
    fn train_forward_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = cfg(2, 4, 5);
        let block = MoleBlockParams::init(&mut rng, &c, true, 0.5);
        let ffn = FfnParams::init(&mut rng, 4, 6, 4, 0.5);
        let emb = Tensor::from_fn(&[5, 4], |_| rng.random::<f64>() - 0.5);
        let h = Tensor::from_fn(&[3, 4], |_| rng.random::<f64>() - 0.5);
        let w = Tensor::from_fn(&[3, 4], |_| rng.random::<f64>() - 0.5);
        let ids = [4usize, 0, 2];

        let mut leaves = vec![h, emb, w];
        leaves.extend(ffn.leaves().into_iter().cloned());
        leaves.extend(block.leaves().into_iter().cloned());
        let report = grad_check(
            |t, v| {
                let mut it = v[3..].iter().copied();
                let mut next = |_: &Tensor| it.next().unwrap();
                let fv = ffn.map_ref(&mut next);
                let bv = block.map_ref(&mut next);
                let y = train_forward(t, v[0], &ids, v[1], &fv, &bv)?;
                let y = t.mul(y, v[2])?;
                Ok(t.sum(y))
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }
}
