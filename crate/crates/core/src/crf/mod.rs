//! Linear-chain CRF tagger over token representations.
//!
//! Emission scores come from a small trainable encoder: each token vector
//! `h_i` (a row of the embedding table, or a frozen external vector) and the
//! mean `c` of all token vectors in the concatenated input are projected to
//! tag scores, `e_i = W_tokᵀ h_i + W_ctxᵀ c + b`. Only the first `boundary`
//! positions are labelled; knowledge positions influence emissions through
//! `c` and receive no tags.

mod io;
pub mod lattice;
mod train;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{EpochStats, TrainConfig, Trainer, TrainingLog};

use crate::corpus::{Tag, TagCategory};
use crate::embedder::{Embedder, EmbedderSpec, TokenRepr, TokenReprSequence};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Tag ids: `O` is 0, then `B-X`, `I-X` for each category in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSetIndex {
    categories: Vec<TagCategory>,
    tags: Vec<Tag>,
}

impl TagSetIndex {
    pub fn new(categories: &[TagCategory]) -> Result<Self> {
        let mut cats = categories.to_vec();
        cats.sort();
        cats.dedup();
        if cats.len() != categories.len() || cats.is_empty() {
            return Err(Error::Config("categories must be non-empty and distinct".into()));
        }
        let mut tags = vec![Tag::O];
        for &c in &cats {
            tags.push(Tag::B(c));
            tags.push(Tag::I(c));
        }
        Ok(TagSetIndex {
            categories: cats,
            tags,
        })
    }

    pub fn standard() -> Self {
        TagSetIndex::new(&TagCategory::ALL).expect("static tag set")
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn categories(&self) -> &[TagCategory] {
        &self.categories
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn id(&self, tag: Tag) -> Option<usize> {
        self.tags.iter().position(|&t| t == tag)
    }

    pub fn tag(&self, id: usize) -> Tag {
        self.tags[id]
    }

    pub fn encode(&self, tags: &[Tag]) -> Result<Vec<usize>> {
        tags.iter()
            .map(|&t| {
                self.id(t)
                    .ok_or_else(|| Error::InvalidInput(format!("tag {t} not in the model tag set")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<Tag> {
        ids.iter().map(|&i| self.tags[i]).collect()
    }
}

/// Settings carried inside a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub categories: Vec<TagCategory>,
    pub embedder: EmbedderSpec,
    /// Whether BIO2-incompatible transitions are fixed at −∞.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfModel {
    pub meta: ModelMeta,
    pub tagset: TagSetIndex,
    /// `(buckets + 1) × e`; the last row embeds the knowledge separator.
    pub table: Matrix,
    /// `e × k` projection of the token vector.
    pub w_tok: Matrix,
    /// `e × k` projection of the pooled sequence vector.
    pub w_ctx: Matrix,
    pub bias: Vec<f64>,
    /// `(k + 2) × (k + 2)`, `[from][to]`, BOS = k, EOS = k + 1.
    pub trans: Matrix,
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl CrfModel {
    /// Fresh model. Table rows start at the embedder's hashed vectors,
    /// projections at seeded Xavier-uniform values, transitions at zero.
    pub fn new(embedder: &Embedder, categories: &[TagCategory], strict: bool) -> Result<Self> {
        let seed = derive_seed(embedder.spec().seed.unwrap_or(0), "crf-init");
        Self::with_init_seed(embedder, categories, strict, seed)
    }

    /// Like [`CrfModel::new`] with an explicit stream seed for the projections.
    pub fn with_init_seed(
        embedder: &Embedder,
        categories: &[TagCategory],
        strict: bool,
        init_seed: u64,
    ) -> Result<Self> {
        let spec = embedder.spec().clone();
        let tagset = TagSetIndex::new(categories)?;
        let k = tagset.len();
        let e = spec.e;
        let rows = embedder.table_rows();
        let mut table = Matrix::zeros(rows, e);
        for r in 0..rows {
            let v = embedder.initial_row(r as u32);
            table.data[r * e..(r + 1) * e].copy_from_slice(&v);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let limit = (6.0 / (e + k) as f64).sqrt();
        let mut draw = |rows, cols| {
            let mut m = Matrix::zeros(rows, cols);
            m.data.iter_mut().for_each(|x| *x = rng.gen_range(-limit..limit));
            m
        };
        let w_tok = draw(e, k);
        let w_ctx = draw(e, k);
        let mut model = CrfModel {
            meta: ModelMeta {
                categories: tagset.categories().to_vec(),
                embedder: spec,
                strict,
            },
            tagset,
            table,
            w_tok,
            w_ctx,
            bias: vec![0.0; k],
            trans: Matrix::zeros(k + 2, k + 2),
        };
        model.apply_structure();
        model.round_to_f32();
        Ok(model)
    }

    pub fn num_tags(&self) -> usize {
        self.tagset.len()
    }

    pub fn dim(&self) -> usize {
        self.meta.embedder.e
    }

    /// Sets structurally impossible transitions to −∞: into BOS, out of EOS,
    /// and under strict decoding every BIO2-invalid move into an `I-X`.
    pub fn apply_structure(&mut self) {
        let k = self.num_tags();
        let (bos, eos) = (lattice::bos(k), lattice::eos(k));
        for i in 0..k + 2 {
            *self.trans.get_mut(i, bos) = f64::NEG_INFINITY;
            *self.trans.get_mut(eos, i) = f64::NEG_INFINITY;
        }
        *self.trans.get_mut(bos, eos) = f64::NEG_INFINITY;
        if self.meta.strict {
            for to in 0..k {
                let tag = self.tagset.tag(to);
                if !tag.may_follow(None) {
                    *self.trans.get_mut(bos, to) = f64::NEG_INFINITY;
                }
                for from in 0..k {
                    if !tag.may_follow(Some(self.tagset.tag(from))) {
                        *self.trans.get_mut(from, to) = f64::NEG_INFINITY;
                    }
                }
            }
        }
    }

    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|x| *x = round_f32(*x));
        }
    }

    /// Trainable tensors in a fixed order: table, w_tok, w_ctx, bias, trans.
    pub fn params_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.table.data,
            &mut self.w_tok.data,
            &mut self.w_ctx.data,
            &mut self.bias,
            &mut self.trans.data,
        ]
    }

    pub fn params(&self) -> [&[f64]; 5] {
        [
            &self.table.data,
            &self.w_tok.data,
            &self.w_ctx.data,
            &self.bias,
            &self.trans.data,
        ]
    }

    fn vectors<'a>(&'a self, reprs: &'a TokenReprSequence) -> Result<Vec<&'a [f64]>> {
        let e = self.dim();
        reprs
            .items()
            .iter()
            .map(|item| match item {
                TokenRepr::Bucket(b) => {
                    let b = *b as usize;
                    if b >= self.table.rows {
                        return Err(Error::InvalidInput(format!(
                            "bucket {b} outside table of {} rows",
                            self.table.rows
                        )));
                    }
                    Ok(self.table.row(b))
                }
                TokenRepr::Fixed(v) if v.len() == e => Ok(v.as_slice()),
                TokenRepr::Fixed(v) => Err(Error::DimensionMismatch {
                    expected: e,
                    actual: v.len(),
                }),
            })
            .collect()
    }

    fn pooled(vectors: &[&[f64]], e: usize) -> Vec<f64> {
        let mut c = vec![0.0; e];
        for v in vectors {
            c.iter_mut().zip(v.iter()).for_each(|(a, x)| *a += x);
        }
        let n = vectors.len() as f64;
        c.iter_mut().for_each(|a| *a /= n);
        c
    }

    /// `boundary × k` emission scores.
    pub fn emissions(&self, reprs: &TokenReprSequence) -> Result<Vec<f64>> {
        let vs = self.vectors(reprs)?;
        let (e, k) = (self.dim(), self.num_tags());
        let c = Self::pooled(&vs, e);
        let mut ctx = self.bias.clone();
        for (kk, &ck) in c.iter().enumerate() {
            for (y, out) in ctx.iter_mut().enumerate() {
                *out += ck * self.w_ctx.get(kk, y);
            }
        }
        let n = reprs.boundary();
        let mut em = Vec::with_capacity(n * k);
        for h in &vs[..n] {
            let mut row = ctx.clone();
            for (kk, &hk) in h.iter().enumerate() {
                for (y, out) in row.iter_mut().enumerate() {
                    *out += hk * self.w_tok.get(kk, y);
                }
            }
            em.extend(row);
        }
        Ok(em)
    }

    pub fn score_sequence(&self, reprs: &TokenReprSequence, tags: &[usize]) -> Result<f64> {
        if tags.len() != reprs.boundary() {
            return Err(Error::InvalidInput(format!(
                "{} tags for {} labelled positions",
                tags.len(),
                reprs.boundary()
            )));
        }
        self.check_ids(tags)?;
        let em = self.emissions(reprs)?;
        Ok(lattice::score_path(&em, self.num_tags(), &self.trans, tags))
    }

    pub fn log_partition(&self, reprs: &TokenReprSequence) -> Result<f64> {
        let em = self.emissions(reprs)?;
        Ok(lattice::log_partition(&em, self.num_tags(), &self.trans))
    }

    pub fn viterbi(&self, reprs: &TokenReprSequence) -> Result<Vec<usize>> {
        let em = self.emissions(reprs)?;
        Ok(lattice::viterbi(&em, self.num_tags(), &self.trans).0)
    }

    pub fn predict_tags(&self, reprs: &TokenReprSequence) -> Result<Vec<Tag>> {
        Ok(self.tagset.decode(&self.viterbi(reprs)?))
    }

    fn check_ids(&self, tags: &[usize]) -> Result<()> {
        match tags.iter().find(|&&t| t >= self.num_tags()) {
            Some(t) => Err(Error::InvalidInput(format!("tag id {t} out of range"))),
            None => Ok(()),
        }
    }

    /// Negative log-likelihood of `gold` and its gradient.
    pub fn nll_and_grad(&self, reprs: &TokenReprSequence, gold: &[usize]) -> Result<(f64, Gradients)> {
        let n = reprs.boundary();
        if gold.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} gold tags for {n} labelled positions",
                gold.len()
            )));
        }
        self.check_ids(gold)?;
        let (e, k) = (self.dim(), self.num_tags());
        let vs = self.vectors(reprs)?;
        let em = self.emissions(reprs)?;
        let gold_score = lattice::score_path(&em, k, &self.trans, gold);
        let marg = lattice::marginals(&em, k, &self.trans);
        let loss = marg.log_z - gold_score;
        if !loss.is_finite() || !marg.log_z.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {loss} (log Z {}, gold score {gold_score})",
                marg.log_z
            )));
        }

        // d loss / d emission = marginal - gold indicator
        let mut g_em = marg.unary;
        for (i, &y) in gold.iter().enumerate() {
            g_em[i * k + y] -= 1.0;
        }
        let mut grads = Gradients::zeros(self);
        grads.trans = marg.pairwise;
        *grads.trans.get_mut(lattice::bos(k), gold[0]) -= 1.0;
        *grads.trans.get_mut(gold[n - 1], lattice::eos(k)) -= 1.0;
        for w in gold.windows(2) {
            *grads.trans.get_mut(w[0], w[1]) -= 1.0;
        }
        for (g, t) in grads.trans.data.iter_mut().zip(&self.trans.data) {
            if !t.is_finite() {
                *g = 0.0;
            }
        }

        let c = Self::pooled(&vs, e);
        let mut g_sum = vec![0.0; k];
        let mut g_h: Vec<Vec<f64>> = vec![vec![0.0; e]; vs.len()];
        for i in 0..n {
            let gi = &g_em[i * k..(i + 1) * k];
            for (s, g) in g_sum.iter_mut().zip(gi) {
                *s += g;
            }
            for kk in 0..e {
                let hk = vs[i][kk];
                let mut acc = 0.0;
                for y in 0..k {
                    *grads.w_tok.get_mut(kk, y) += gi[y] * hk;
                    acc += gi[y] * self.w_tok.get(kk, y);
                }
                g_h[i][kk] += acc;
            }
        }
        grads.bias.copy_from_slice(&g_sum);
        let inv_len = 1.0 / vs.len() as f64;
        for kk in 0..e {
            let mut g_c = 0.0;
            for y in 0..k {
                *grads.w_ctx.get_mut(kk, y) += g_sum[y] * c[kk];
                g_c += g_sum[y] * self.w_ctx.get(kk, y);
            }
            for gh in g_h.iter_mut() {
                gh[kk] += g_c * inv_len;
            }
        }
        for (item, gh) in reprs.items().iter().zip(g_h) {
            if let TokenRepr::Bucket(b) = item {
                let row = grads.table.entry(*b).or_insert_with(|| vec![0.0; e]);
                row.iter_mut().zip(gh).for_each(|(r, g)| *r += g);
            }
        }
        Ok((loss, grads))
    }
}

/// Gradient of the loss with respect to every trainable tensor. Table
/// gradients are sparse by row, keyed in ascending bucket order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub table: BTreeMap<u32, Vec<f64>>,
    pub w_tok: Matrix,
    pub w_ctx: Matrix,
    pub bias: Vec<f64>,
    pub trans: Matrix,
}

impl Gradients {
    pub fn zeros(model: &CrfModel) -> Self {
        Gradients {
            table: BTreeMap::new(),
            w_tok: Matrix::zeros(model.w_tok.rows, model.w_tok.cols),
            w_ctx: Matrix::zeros(model.w_ctx.rows, model.w_ctx.cols),
            bias: vec![0.0; model.bias.len()],
            trans: Matrix::zeros(model.trans.rows, model.trans.cols),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (b, row) in &other.table {
            let mine = self.table.entry(*b).or_insert_with(|| vec![0.0; row.len()]);
            mine.iter_mut().zip(row).for_each(|(m, g)| *m += scale * g);
        }
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        add(&mut self.w_tok.data, &other.w_tok.data);
        add(&mut self.w_ctx.data, &other.w_ctx.data);
        add(&mut self.bias, &other.bias);
        add(&mut self.trans.data, &other.trans.data);
    }

    /// Dense gradient of the whole table (for checks and the optimizer).
    pub fn dense_table(&self, rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for (b, row) in &self.table {
            let b = *b as usize;
            out[b * cols..(b + 1) * cols].copy_from_slice(row);
        }
        out
    }
}
