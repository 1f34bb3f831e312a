//! Learnable prompt tokens and the frozen toy text encoder that maps a token
//! sequence to a unit-norm text embedding.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, norm, normalize_slice, UnitEmbedding};
use crate::error::{Error, Result};

/// Row-major block of token vectors, one token per row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_data(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch {
                expected: rows * dim,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { rows, dim, data })
    }

    /// I.i.d. zero-mean Gaussian entries.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * dim).map(|_| normal.sample(rng)).collect();
        Self { rows, dim, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Per-class shared prompts: `classes` rows of `m1` tokens each.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedPromptSet {
    m1: usize,
    tokens: TokenMatrix,
}

impl SharedPromptSet {
    pub fn new(m1: usize, tokens: TokenMatrix) -> Result<Self> {
        if m1 == 0 || !tokens.rows().is_multiple_of(m1) {
            return Err(Error::InvalidConfig(format!(
                "shared prompt block of {} rows is not a multiple of M1 = {m1}",
                tokens.rows()
            )));
        }
        Ok(Self { m1, tokens })
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn classes(&self) -> usize {
        self.tokens.rows() / self.m1
    }

    pub fn tokens(&self) -> &TokenMatrix {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut TokenMatrix {
        &mut self.tokens
    }

    fn class_rows(&self, k: usize) -> impl Iterator<Item = &[f64]> {
        (k * self.m1..(k + 1) * self.m1).map(move |r| self.tokens.row(r))
    }
}

/// Which text table a prompt belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Owner {
    Source(usize),
    Target,
    /// The hand-crafted base prompt: frozen context plus class token.
    Base,
}

/// Domain-specific prompt of `M2` tokens, shared across classes.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPrompt {
    pub owner: Owner,
    pub tokens: TokenMatrix,
}

/// Frozen class-name tokens, one per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTokenSet(pub TokenMatrix);

/// Frozen context tokens of the base prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseContext(pub TokenMatrix);

/// Every prompt token, learnable and frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub shared: SharedPromptSet,
    pub sources: Vec<DomainPrompt>,
    pub target: DomainPrompt,
    pub classes: ClassTokenSet,
    pub base: BaseContext,
}

impl PromptBank {
    /// Fresh bank with learnable tokens drawn from N(0, init_std^2).
    pub fn initialize<R: Rng + ?Sized>(
        n_sources: usize,
        m1: usize,
        m2: usize,
        init_std: f64,
        classes: ClassTokenSet,
        base: BaseContext,
        rng: &mut R,
    ) -> Result<Self> {
        if n_sources == 0 {
            return Err(Error::InvalidConfig("at least one source domain is required".into()));
        }
        if m1 == 0 || m2 == 0 {
            return Err(Error::InvalidConfig("prompt lengths M1 and M2 must be >= 1".into()));
        }
        let k = classes.0.rows();
        let d_tok = classes.0.dim();
        let shared = SharedPromptSet::new(m1, TokenMatrix::random_normal(k * m1, d_tok, init_std, rng))?;
        let sources = (0..n_sources)
            .map(|i| DomainPrompt {
                owner: Owner::Source(i),
                tokens: TokenMatrix::random_normal(m2, d_tok, init_std, rng),
            })
            .collect();
        let target = DomainPrompt {
            owner: Owner::Target,
            tokens: TokenMatrix::random_normal(m2, d_tok, init_std, rng),
        };
        let bank = Self {
            shared,
            sources,
            target,
            classes,
            base,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let d_tok = self.d_tok();
        let blocks = [
            self.shared.tokens(),
            &self.target.tokens,
            &self.classes.0,
            &self.base.0,
        ];
        for b in blocks.into_iter().chain(self.sources.iter().map(|s| &s.tokens)) {
            if b.dim() != d_tok {
                return Err(Error::DimensionMismatch {
                    expected: d_tok,
                    found: b.dim(),
                });
            }
        }
        if self.shared.classes() != self.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes(),
                found: self.shared.classes(),
            });
        }
        if self.sources.is_empty() {
            return Err(Error::InvalidConfig("at least one source domain is required".into()));
        }
        let m2 = self.m2();
        if self.sources.iter().any(|s| s.tokens.rows() != m2) {
            return Err(Error::InvalidConfig("all domain prompts must have M2 tokens".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.0.rows()
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn d_tok(&self) -> usize {
        self.classes.0.dim()
    }

    pub fn m1(&self) -> usize {
        self.shared.m1()
    }

    pub fn m2(&self) -> usize {
        self.target.tokens.rows()
    }

    fn domain_tokens(&self, owner: Owner) -> Result<&TokenMatrix> {
        match owner {
            Owner::Source(i) => self
                .sources
                .get(i)
                .map(|p| &p.tokens)
                .ok_or_else(|| Error::UnknownOwner(format!("source {i}"))),
            Owner::Target => Ok(&self.target.tokens),
            Owner::Base => Err(Error::UnknownOwner("base has no domain tokens".into())),
        }
    }

    /// Learnable blocks in a fixed order: shared, each source, target.
    pub fn learnable_blocks(&self) -> Vec<&[f64]> {
        let mut out = vec![self.shared.tokens().data()];
        out.extend(self.sources.iter().map(|s| s.tokens.data()));
        out.push(self.target.tokens.data());
        out
    }

    pub fn learnable_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.shared.tokens_mut().data_mut()];
        out.extend(self.sources.iter_mut().map(|s| s.tokens.data_mut()));
        out.push(self.target.tokens.data_mut());
        out
    }
}

/// Token sequence of the prompt for class `k`:
/// `[shared_k][domain][class_k]`, or `[base context][class_k]` for the base owner.
pub fn compose_prompt(bank: &PromptBank, k: usize, owner: Owner) -> Result<Vec<&[f64]>> {
    let classes = bank.num_classes();
    if k >= classes {
        return Err(Error::ClassOutOfRange { index: k, classes });
    }
    let class_token = bank.classes.0.row(k);
    if owner == Owner::Base {
        let base = &bank.base.0;
        let mut seq: Vec<&[f64]> = (0..base.rows()).map(|r| base.row(r)).collect();
        seq.push(class_token);
        return Ok(seq);
    }
    let domain = bank.domain_tokens(owner)?;
    let mut seq: Vec<&[f64]> = bank.shared.class_rows(k).collect();
    seq.extend((0..domain.rows()).map(|r| domain.row(r)));
    seq.push(class_token);
    Ok(seq)
}

/// Layer widths and seed of a [`TextEncoder`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub seed: u64,
    pub d_tok: usize,
    pub d_hid: usize,
    pub d_out: usize,
}

/// Frozen stand-in for a text encoder: mean-pool, two tanh layers, L2 normalize.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    shape: EncoderShape,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Intermediate activations of one forward pass.
pub(crate) struct Forward {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub h2_norm: f64,
}

const BIAS_STD: f64 = 0.01;
/// Scale of the first layer relative to 1/sqrt(fan_in). Mean pooling over
/// 33 tokens damps each token's influence, so the input layer amplifies.
pub const INPUT_GAIN: f64 = 10.0;

impl TextEncoder {
    pub fn new(shape: EncoderShape) -> Result<Self> {
        let EncoderShape {
            seed,
            d_tok,
            d_hid,
            d_out,
        } = shape;
        if d_tok == 0 || d_hid == 0 || d_out == 0 {
            return Err(Error::InvalidConfig("encoder widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = gaussian(&mut rng, d_hid * d_tok, INPUT_GAIN / (d_tok as f64).sqrt());
        let b1 = gaussian(&mut rng, d_hid, BIAS_STD);
        let w2 = gaussian(&mut rng, d_out * d_hid, 1.0 / (d_hid as f64).sqrt());
        let b2 = gaussian(&mut rng, d_out, BIAS_STD);
        Ok(Self {
            shape,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn shape(&self) -> EncoderShape {
        self.shape
    }

    pub fn d_tok(&self) -> usize {
        self.shape.d_tok
    }

    pub fn d_out(&self) -> usize {
        self.shape.d_out
    }

    fn pool(&self, seq: &[&[f64]]) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        let d_tok = self.shape.d_tok;
        let mut pooled = vec![0.0; d_tok];
        for tok in seq {
            if tok.len() != d_tok {
                return Err(Error::DimensionMismatch {
                    expected: d_tok,
                    found: tok.len(),
                });
            }
            for (p, t) in pooled.iter_mut().zip(tok.iter()) {
                *p += t;
            }
        }
        let inv = 1.0 / seq.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);
        Ok(pooled)
    }

    pub(crate) fn forward_pooled(&self, pooled: &[f64]) -> Forward {
        let EncoderShape { d_tok, d_hid, .. } = self.shape;
        let h1: Vec<f64> = (0..d_hid)
            .map(|r| (dot(&self.w1[r * d_tok..(r + 1) * d_tok], pooled) + self.b1[r]).tanh())
            .collect();
        let h2: Vec<f64> = (0..self.shape.d_out)
            .map(|r| (dot(&self.w2[r * d_hid..(r + 1) * d_hid], &h1) + self.b2[r]).tanh())
            .collect();
        let h2_norm = norm(&h2);
        Forward {
            h1,
            h2,
            h2_norm,
        }
    }

    pub fn encode(&self, seq: &[&[f64]]) -> Result<UnitEmbedding> {
        let fwd = self.forward_pooled(&self.pool(seq)?);
        normalize_slice(&fwd.h2)
    }

    /// Gradient of `upstream . encode(seq)` with respect to every token of
    /// `seq`. Mean pooling makes all rows identical.
    pub fn encode_backward(&self, seq: &[&[f64]], upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
        if upstream.len() != self.shape.d_out {
            return Err(Error::DimensionMismatch {
                expected: self.shape.d_out,
                found: upstream.len(),
            });
        }
        let fwd = self.forward_pooled(&self.pool(seq)?);
        if !(fwd.h2_norm > crate::embedding::MIN_NORM) {
            return Err(Error::ZeroVector { norm: fwd.h2_norm });
        }
        let grad = self.pooled_backward(&fwd, upstream);
        let inv = 1.0 / seq.len() as f64;
        let per_token: Vec<f64> = grad.iter().map(|g| g * inv).collect();
        Ok(vec![per_token; seq.len()])
    }

    /// Gradient with respect to the pooled input.
    pub(crate) fn pooled_backward(&self, fwd: &Forward, upstream: &[f64]) -> Vec<f64> {
        let EncoderShape {
            d_tok, d_hid, d_out, ..
        } = self.shape;
        // through x / |x|: (g - (g.u) u) / |x|
        let out: Vec<f64> = fwd.h2.iter().map(|h| h / fwd.h2_norm).collect();
        let radial = dot(upstream, &out);
        let g_a2: Vec<f64> = (0..d_out)
            .map(|r| (upstream[r] - radial * out[r]) / fwd.h2_norm * (1.0 - fwd.h2[r] * fwd.h2[r]))
            .collect();
        let mut g_a1 = vec![0.0; d_hid];
        for (r, &g) in g_a2.iter().enumerate() {
            let row = &self.w2[r * d_hid..(r + 1) * d_hid];
            for (acc, w) in g_a1.iter_mut().zip(row) {
                *acc += g * w;
            }
        }
        for (g, h) in g_a1.iter_mut().zip(&fwd.h1) {
            *g *= 1.0 - h * h;
        }
        let mut g_m = vec![0.0; d_tok];
        for (r, &g) in g_a1.iter().enumerate() {
            let row = &self.w1[r * d_tok..(r + 1) * d_tok];
            for (acc, w) in g_m.iter_mut().zip(row) {
                *acc += g * w;
            }
        }
        g_m
    }

    /// Jacobian of the pre-normalization output `h2` with respect to the
    /// pooled input, row-major `d_out x d_tok`.
    pub(crate) fn pooled_jacobian(&self, fwd: &Forward) -> Vec<f64> {
        let EncoderShape {
            d_tok, d_hid, d_out, ..
        } = self.shape;
        // inner[h][t] = (1 - h1[h]^2) * w1[h][t]
        let mut jac = vec![0.0; d_out * d_tok];
        for r in 0..d_out {
            let s2 = 1.0 - fwd.h2[r] * fwd.h2[r];
            let out_row = &mut jac[r * d_tok..(r + 1) * d_tok];
            for h in 0..d_hid {
                let coef = s2 * self.w2[r * d_hid + h] * (1.0 - fwd.h1[h] * fwd.h1[h]);
                if coef == 0.0 {
                    continue;
                }
                for (acc, w) in out_row.iter_mut().zip(&self.w1[h * d_tok..(h + 1) * d_tok]) {
                    *acc += coef * w;
                }
            }
        }
        jac
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Text embeddings of all classes for one owner.
pub fn text_embedding_table(bank: &PromptBank, enc: &TextEncoder, owner: Owner) -> Result<Vec<UnitEmbedding>> {
    (0..bank.num_classes())
        .map(|k| enc.encode(&compose_prompt(bank, k, owner)?))
        .collect()
}

/// Gradients for the learnable prompt blocks. `None` marks a block the loss
/// does not depend on.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGrads {
    pub shared: Vec<f64>,
    pub sources: Vec<Option<Vec<f64>>>,
    pub target: Option<Vec<f64>>,
}

impl PromptGrads {
    pub fn empty(bank: &PromptBank) -> Self {
        Self {
            shared: vec![0.0; bank.shared.tokens().data().len()],
            sources: vec![None; bank.num_sources()],
            target: None,
        }
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, other: &PromptGrads, scale: f64) {
        axpy(&mut self.shared, &other.shared, scale);
        for (mine, theirs) in self.sources.iter_mut().zip(&other.sources) {
            add_block(mine, theirs.as_deref(), scale);
        }
        add_block(&mut self.target, other.target.as_deref(), scale);
    }

    /// Dense blocks in [`PromptBank::learnable_blocks`] order; untouched
    /// blocks become zeros.
    pub fn dense_blocks(&self, bank: &PromptBank) -> Vec<Vec<f64>> {
        let mut out = vec![self.shared.clone()];
        for (g, src) in self.sources.iter().zip(&bank.sources) {
            out.push(g.clone().unwrap_or_else(|| vec![0.0; src.tokens.data().len()]));
        }
        out.push(
            self.target
                .clone()
                .unwrap_or_else(|| vec![0.0; bank.target.tokens.data().len()]),
        );
        out
    }

    /// Accumulates the token gradients of the class-`k` prompt of `owner`.
    /// `per_token` has one row per token of `compose_prompt(bank, k, owner)`;
    /// the frozen class token row is dropped.
    pub(crate) fn scatter(&mut self, bank: &PromptBank, k: usize, owner: Owner, per_token: &[Vec<f64>]) {
        let d = bank.d_tok();
        let m1 = bank.m1();
        for (j, g) in per_token[..m1].iter().enumerate() {
            let row = k * m1 + j;
            axpy(&mut self.shared[row * d..(row + 1) * d], g, 1.0);
        }
        let domain = match owner {
            Owner::Source(i) => &mut self.sources[i],
            Owner::Target => &mut self.target,
            Owner::Base => return,
        };
        let m2 = bank.m2();
        let block = domain.get_or_insert_with(|| vec![0.0; m2 * d]);
        for (j, g) in per_token[m1..m1 + m2].iter().enumerate() {
            axpy(&mut block[j * d..(j + 1) * d], g, 1.0);
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn add_block(mine: &mut Option<Vec<f64>>, theirs: Option<&[f64]>, scale: f64) {
    if let Some(theirs) = theirs {
        let block = mine.get_or_insert_with(|| vec![0.0; theirs.len()]);
        axpy(block, theirs, scale);
    }
}

/// Backpropagates per-class gradients with respect to the text table of
/// `owner` into prompt-token gradients.
pub fn table_backward(
    bank: &PromptBank,
    enc: &TextEncoder,
    owner: Owner,
    table_grads: &[Vec<f64>],
    grads: &mut PromptGrads,
) -> Result<()> {
    for (k, g) in table_grads.iter().enumerate() {
        if g.iter().all(|x| *x == 0.0) {
            continue;
        }
        let seq = compose_prompt(bank, k, owner)?;
        let per_token = enc.encode_backward(&seq, g)?;
        grads.scatter(bank, k, owner, &per_token);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_similarity;

    fn small_bank(seed: u64, k: usize, m1: usize, m2: usize, d_tok: usize) -> PromptBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = ClassTokenSet(TokenMatrix::random_normal(k, d_tok, 1.0, &mut rng));
        let base = BaseContext(TokenMatrix::random_normal(4, d_tok, 0.3, &mut rng));
        PromptBank::initialize(2, m1, m2, 0.02, classes, base, &mut rng).unwrap()
    }

    fn encoder(d_tok: usize, d_out: usize) -> TextEncoder {
        TextEncoder::new(EncoderShape {
            seed: 5,
            d_tok,
            d_hid: d_tok,
            d_out,
        })
        .unwrap()
    }

    #[test]
    fn composed_lengths() {
        let bank = small_bank(1, 3, 16, 16, 8);
        assert_eq!(compose_prompt(&bank, 0, Owner::Source(1)).unwrap().len(), 33);
        assert_eq!(compose_prompt(&bank, 2, Owner::Target).unwrap().len(), 33);
        assert_eq!(compose_prompt(&bank, 1, Owner::Base).unwrap().len(), 5);
        assert!(matches!(
            compose_prompt(&bank, 0, Owner::Source(2)),
            Err(Error::UnknownOwner(_))
        ));
        assert!(compose_prompt(&bank, 3, Owner::Target).is_err());
    }

    #[test]
    fn classes_differ_only_in_shared_and_class_rows() {
        let bank = small_bank(2, 3, 4, 5, 6);
        let a = compose_prompt(&bank, 0, Owner::Target).unwrap();
        let b = compose_prompt(&bank, 1, Owner::Target).unwrap();
        for j in 0..4 {
            assert_ne!(a[j], b[j]);
        }
        for j in 4..9 {
            assert_eq!(a[j], b[j]);
        }
        assert_ne!(a[9], b[9]);
    }

    #[test]
    fn encode_is_deterministic_and_unit() {
        let bank = small_bank(3, 3, 4, 4, 8);
        let seq = compose_prompt(&bank, 1, Owner::Source(0)).unwrap();
        let a = encoder(8, 6).encode(&seq).unwrap();
        let b = encoder(8, 6).encode(&seq).unwrap();
        assert_eq!(a, b);
        assert!((norm(a.values()) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn encode_is_permutation_invariant() {
        let bank = small_bank(4, 2, 3, 3, 5);
        let enc = encoder(5, 5);
        let seq = compose_prompt(&bank, 0, Owner::Target).unwrap();
        let mut rev = seq.clone();
        rev.reverse();
        let a = enc.encode(&seq).unwrap();
        let b = enc.encode(&rev).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn encode_rejects_empty_and_ragged() {
        let enc = encoder(3, 3);
        assert!(matches!(enc.encode(&[]), Err(Error::EmptySequence)));
        let a = [1.0, 2.0, 3.0];
        let b = [1.0, 2.0];
        assert!(matches!(
            enc.encode(&[&a, &b]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let bank = small_bank(5, 2, 2, 2, 4);
        let enc = encoder(4, 4);
        let seq = compose_prompt(&bank, 0, Owner::Target).unwrap();
        let g = enc.encode_backward(&seq, &[0.0; 4]).unwrap();
        assert_eq!(g.len(), seq.len());
        assert!(g.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let d_tok = 6;
        let enc = encoder(d_tok, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let toks = TokenMatrix::random_normal(7, d_tok, 1.0, &mut rng);
            let upstream: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let seq: Vec<&[f64]> = (0..7).map(|r| toks.row(r)).collect();
            let analytic = enc.encode_backward(&seq, &upstream).unwrap();
            let (tok, coord) = (trial % 7, (trial * 3) % d_tok);
            let h = 1e-5;
            let eval = |delta: f64| {
                let mut t = toks.clone();
                t.row_mut(tok)[coord] += delta;
                let seq: Vec<&[f64]> = (0..7).map(|r| t.row(r)).collect();
                dot(enc.encode(&seq).unwrap().values(), &upstream)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[tok][coord];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-5, "trial {trial}: analytic {a} fd {fd} rel {rel}");
        }
    }

    #[test]
    fn normalization_annihilates_radial_direction() {
        // An upstream gradient parallel to the output has no effect, since the
        // output cannot move along its own direction.
        let enc = encoder(4, 4);
        let toks = [[0.3, -0.2, 0.5, 0.1], [0.7, 0.4, -0.6, 0.2]];
        let seq: Vec<&[f64]> = toks.iter().map(|t| t.as_slice()).collect();
        let out = enc.encode(&seq).unwrap();
        let g = enc.encode_backward(&seq, out.values()).unwrap();
        assert!(g.iter().flatten().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn base_table_is_frozen_under_learnable_updates() {
        let mut bank = small_bank(6, 3, 2, 2, 4);
        let enc = encoder(4, 4);
        let base_before = text_embedding_table(&bank, &enc, Owner::Base).unwrap();
        let src_before = text_embedding_table(&bank, &enc, Owner::Source(0)).unwrap();
        bank.target.tokens.data_mut().iter_mut().for_each(|x| *x += 0.5);
        assert_eq!(text_embedding_table(&bank, &enc, Owner::Base).unwrap(), base_before);
        assert_eq!(text_embedding_table(&bank, &enc, Owner::Source(0)).unwrap(), src_before);
        assert_eq!(base_before.len(), 3);
    }

    #[test]
    fn base_embeddings_are_distinct() {
        for seed in 0..10 {
            let bank = small_bank(seed, 5, 2, 2, 8);
            let enc = encoder(8, 8);
            let table = text_embedding_table(&bank, &enc, Owner::Base).unwrap();
            for a in 0..5 {
                for b in a + 1..5 {
                    assert!(cosine_similarity(&table[a], &table[b]).unwrap() < 1.0 - 1e-6);
                }
            }
        }
    }

    #[test]
    fn scatter_routes_blocks() {
        let bank = small_bank(7, 2, 2, 3, 4);
        let enc = encoder(4, 4);
        let mut grads = PromptGrads::empty(&bank);
        let table_grads = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0; 4]];
        table_backward(&bank, &enc, Owner::Source(1), &table_grads, &mut grads).unwrap();
        assert!(grads.target.is_none());
        assert!(grads.sources[0].is_none());
        assert!(grads.sources[1].is_some());
        // class 1 rows of the shared block untouched
        assert!(grads.shared[2 * 4..].iter().all(|x| *x == 0.0));
    }
}
