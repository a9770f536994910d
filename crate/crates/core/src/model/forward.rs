use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{MaskedBatch, Target, TokenId};
use crate::numerics::{softmax_into, Float, Graph, NumericsError, Objective, ParamStore, Segments, Tensor, Var};

use super::encoder::{encode, EncoderInput};
use super::{ModelError, PolyLm};

/// Probabilities below this are clamped before the distinctness logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub r: f64,
    pub lambda_m: f64,
    pub train: bool,
    /// Include the distinctness term (ablations switch it off).
    pub distinctness: bool,
    /// Run the clean disambiguation pass that feeds the match loss.
    pub match_pass: bool,
    /// Fixed values standing in for the stop-gradient copy of q^P in the
    /// match loss (flat, in target order). Used by gradient checks, where
    /// perturbed evaluations must see the same constant.
    pub frozen_q_p: Option<Vec<f64>>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { r: 1.0, lambda_m: 0.0, train: false, distinctness: true, match_pass: true, frozen_q_p: None }
    }
}

impl ForwardOptions {
    /// Inference: no dropout, no clean pass.
    pub fn inference() -> Self {
        ForwardOptions { match_pass: false, ..Default::default() }
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub j_lm: Var,
    pub j_d: Var,
    pub j_m: Var,
    /// Full-inventory logits at target positions, `[targets × |S|]`.
    pub logits: Var,
    /// Target word sense distributions from the prediction layer.
    pub q_p: Var,
    /// Per-position sense distributions on the masked sequence.
    pub q_d_masked: Var,
    /// Per-target sense distributions from the clean sequence.
    pub q_d_clean: Option<Var>,
}

/// Plain-value copies of everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub targets: Vec<Target>,
    /// True word at each target.
    pub target_words: Vec<TokenId>,
    /// Trimmed row length the pass ran at.
    pub len: usize,
    pub total_senses: usize,
    pub logits: Vec<f64>,
    pub q_p: Vec<Vec<f64>>,
    /// Indexed by `row * len + pos`.
    pub q_d_masked: Vec<Vec<f64>>,
    pub q_d_clean: Vec<Vec<f64>>,
    pub j_lm: f64,
    pub j_d: f64,
    pub j_m: f64,
    pub total: f64,
}

impl ForwardOutputs {
    /// Full-inventory sense probabilities at target `i`.
    pub fn p(&self, i: usize) -> Vec<f64> {
        let s = self.total_senses;
        let mut out = vec![0.0; s];
        softmax_into(&self.logits[i * s..(i + 1) * s], &mut out);
        out
    }

    pub fn q_d_at(&self, row: usize, pos: usize) -> &[f64] {
        &self.q_d_masked[row * self.len + pos]
    }
}

/// Output of the disambiguation layer on one sequence.
#[derive(Clone, Debug)]
pub struct Disambiguation {
    pub y_d: Tensor<f32>,
    pub q_d: Vec<Vec<f32>>,
    pub x_p: Tensor<f32>,
}

pub struct Forward<T: Float> {
    pub graph: Graph<T>,
    /// Parameter leaves, indexed by `ParamId`.
    pub params: Vec<Var>,
    pub vars: LossVars,
    pub outputs: ForwardOutputs,
}

/// Sense-level view of a token sequence.
struct SenseLayout {
    ids: Rc<Vec<usize>>,
    seg: Rc<Segments>,
    /// Sequence position owning each sense entry.
    owner: Rc<Vec<usize>>,
}

impl PolyLm {
    fn sense_layout(&self, toks: &[TokenId]) -> SenseLayout {
        let mut ids = Vec::new();
        let mut lens = Vec::with_capacity(toks.len());
        let mut owner = Vec::new();
        for (n, &t) in toks.iter().enumerate() {
            let r = self.inventory.senses(t);
            lens.push(r.len());
            owner.extend(std::iter::repeat_n(n, r.len()));
            ids.extend(r);
        }
        SenseLayout { ids: Rc::new(ids), seg: Rc::new(Segments::from_lengths(lens)), owner: Rc::new(owner) }
    }

    /// x(w) for every token: mixture-weighted sums of the sense rows.
    fn input_layer<T: Float>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        sl: &SenseLayout,
    ) -> Result<(Var, Var), NumericsError> {
        let l = &self.layout;
        let mix = g.gather(vars[l.mixture_logits.0], sl.ids.clone())?;
        let lambda = g.segment_softmax(mix, sl.seg.clone())?;
        let rows = g.gather_rows(vars[l.sense_embeddings.0], sl.ids.clone())?;
        let x = g.segment_weighted_sum(lambda, rows, sl.seg.clone())?;
        Ok((x, rows))
    }

    /// Softmax over each block of `e_s · y + b_s`, where `rows` holds the
    /// gathered sense embeddings and `owner` maps entries to rows of `y`.
    fn sense_distribution<T: Float>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        y: Var,
        rows: Var,
        ids: Rc<Vec<usize>>,
        owner: Rc<Vec<usize>>,
        seg: Rc<Segments>,
    ) -> Result<Var, NumericsError> {
        let yr = g.gather_rows(y, owner)?;
        let dot = g.row_dot(rows, yr)?;
        let b = g.gather(vars[self.layout.sense_bias.0], ids)?;
        let logit = g.add(dot, b)?;
        g.segment_softmax(logit, seg)
    }

    /// Builds the loss for `batch` on `g`, whose parameter leaves are `vars`.
    pub fn build_loss<T: Float, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        batch: &MaskedBatch,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<LossVars, ModelError> {
        if batch.targets.is_empty() {
            return Err(ModelError::Batch("batch has no targets".into()));
        }
        if batch.seq_len() > self.config.seq_len {
            return Err(ModelError::Batch(format!(
                "sequence length {} exceeds configured {}",
                batch.seq_len(),
                self.config.seq_len
            )));
        }
        if opts.r < 1.0 {
            return Err(ModelError::Config(format!("sharpening exponent r={} must be at least 1", opts.r)));
        }
        let rows = batch.rows();
        let len = *batch.lengths.iter().max().unwrap();
        let vocab_size = self.inventory.num_tokens() as TokenId;
        let flat = |src: &Vec<Vec<TokenId>>| -> Result<Vec<TokenId>, ModelError> {
            let v: Vec<TokenId> = src.iter().flat_map(|r| r[..len].iter().copied()).collect();
            match v.iter().find(|&&t| t >= vocab_size) {
                Some(t) => Err(ModelError::Batch(format!("token id {t} outside the vocabulary"))),
                None => Ok(v),
            }
        };
        let masked = flat(&batch.masked)?;
        let clean = flat(&batch.original)?;

        let l = &self.layout;
        let e = vars[l.sense_embeddings.0];
        let enc_in = EncoderInput { cfg: &self.config, vars, rows, len, key_len: &batch.lengths, train: opts.train };
        let pos_ids: Rc<Vec<usize>> = Rc::new((0..rows * len).map(|n| n % len).collect());
        let pos = g.gather_rows(vars[l.position_embeddings.0], pos_ids)?;

        // Disambiguation on the masked sequence.
        let sl = self.sense_layout(&masked);
        let (x, erows) = self.input_layer(g, vars, &sl)?;
        let h = g.add(x, pos)?;
        let y_d = encode(g, &enc_in, &l.disamb, h, rng)?;
        let q_d = self.sense_distribution(g, vars, y_d, erows, sl.ids.clone(), sl.owner.clone(), sl.seg.clone())?;
        let x_p = g.segment_weighted_sum(q_d, erows, sl.seg.clone())?;

        // Prediction at target positions only.
        let h = g.add(x_p, pos)?;
        let y_p = encode(g, &enc_in, &l.predict, h, rng)?;
        let tpos: Vec<usize> = batch.targets.iter().map(|t| t.row * len + t.pos).collect();
        let y_t = g.gather_rows(y_p, Rc::new(tpos.clone()))?;
        let logits = g.matmul_t(y_t, e)?;
        let logits = g.add_bias(logits, vars[l.sense_bias.0])?;

        let s_total = self.inventory.total();
        let mut word_idx = Vec::new();
        let mut word_ids = Vec::new();
        let mut word_owner = Vec::new();
        let mut word_lens = Vec::new();
        for (i, &p) in tpos.iter().enumerate() {
            let r = self.inventory.senses(clean[p]);
            word_lens.push(r.len());
            for s in r {
                word_idx.push(i * s_total + s);
                word_ids.push(s);
                word_owner.push(p);
            }
        }
        let tseg = Rc::new(Segments::from_lengths(word_lens));
        let tl = g.gather(logits, Rc::new(word_idx))?;
        let lse_all = g.log_sum_exp(logits);
        let lse_word = g.segment_log_sum_exp(tl, tseg.clone())?;
        let nll = g.sub(lse_all, lse_word)?;
        let j_lm = g.mean(nll);
        let q_p = g.segment_softmax(tl, tseg.clone())?;

        let j_d = if opts.distinctness && opts.r != 1.0 {
            let logq = g.segment_log_softmax(tl, tseg.clone())?;
            let logq = g.clamp_min(logq, T::cst(PROB_FLOOR.ln()));
            let sharp = g.scale(logq, T::cst(opts.r));
            let per = g.segment_log_sum_exp(sharp, tseg.clone())?;
            let m = g.mean(per);
            g.scale(m, T::cst(-1.0 / opts.r))
        } else {
            g.constant(Tensor::scalar(T::zero()))
        };

        let (j_m, q_d_clean) = if opts.match_pass {
            let sl_c = self.sense_layout(&clean);
            let (x_c, _) = self.input_layer(g, vars, &sl_c)?;
            let h_c = g.add(x_c, pos)?;
            let y_dc = encode(g, &enc_in, &l.disamb, h_c, rng)?;
            let ids = Rc::new(word_ids);
            let rows_t = g.gather_rows(e, ids.clone())?;
            let q_dc = self.sense_distribution(g, vars, y_dc, rows_t, ids, Rc::new(word_owner), tseg.clone())?;
            let target = match &opts.frozen_q_p {
                Some(v) => {
                    if v.len() != g.value(q_p).len() {
                        return Err(ModelError::Batch("frozen q^P does not match the batch targets".into()));
                    }
                    g.constant(Tensor::vector(v.iter().map(|&x| T::cst(x)).collect()))
                }
                None => g.stop_gradient(q_p),
            };
            let cos = g.segment_cosine(q_dc, target, tseg)?;
            let m = g.mean(cos);
            (g.scale(m, T::cst(-opts.lambda_m)), Some(q_dc))
        } else {
            (g.constant(Tensor::scalar(T::zero())), None)
        };

        let partial = g.add(j_lm, j_d)?;
        let total = g.add(partial, j_m)?;
        Ok(LossVars { total, j_lm, j_d, j_m, logits, q_p, q_d_masked: q_d, q_d_clean })
    }

    /// Forward pass with the model's own parameters.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &MaskedBatch,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<Forward<f32>, ModelError> {
        self.forward_with(&self.params, batch, opts, rng)
    }

    /// Forward pass with an external parameter point at any precision.
    pub fn forward_with<T: Float, R: Rng + ?Sized>(
        &self,
        params: &ParamStore<T>,
        batch: &MaskedBatch,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<Forward<T>, ModelError> {
        let mut graph = Graph::new();
        let pv = params.bind(&mut graph);
        let vars = self.build_loss(&mut graph, &pv, batch, opts, rng)?;
        let outputs = self.collect_outputs(&graph, &vars, batch);
        Ok(Forward { graph, params: pv, vars, outputs })
    }

    fn collect_outputs<T: Float>(&self, g: &Graph<T>, v: &LossVars, batch: &MaskedBatch) -> ForwardOutputs {
        let len = *batch.lengths.iter().max().unwrap();
        let f64s = |var: Var| -> Vec<f64> { g.value(var).data().iter().map(|x| x.as_f64()).collect() };
        let target_words: Vec<TokenId> = batch.targets.iter().map(|t| batch.original[t.row][t.pos]).collect();
        let split = |flat: Vec<f64>, toks: &mut dyn Iterator<Item = TokenId>| -> Vec<Vec<f64>> {
            let mut out = Vec::new();
            let mut at = 0;
            for t in toks {
                let k = self.inventory.sense_count(t);
                out.push(flat[at..at + k].to_vec());
                at += k;
            }
            out
        };
        let q_p = split(f64s(v.q_p), &mut target_words.iter().copied());
        let q_d_clean = match v.q_d_clean {
            Some(q) => split(f64s(q), &mut target_words.iter().copied()),
            None => Vec::new(),
        };
        let mut masked_toks = batch.masked.iter().flat_map(|r| r[..len].iter().copied());
        let q_d_masked = split(f64s(v.q_d_masked), &mut masked_toks);
        let scalar = |var: Var| g.value(var).item().as_f64();
        ForwardOutputs {
            targets: batch.targets.clone(),
            target_words,
            len,
            total_senses: self.inventory.total(),
            logits: f64s(v.logits),
            q_p,
            q_d_masked,
            q_d_clean,
            j_lm: scalar(v.j_lm),
            j_d: scalar(v.j_d),
            j_m: scalar(v.j_m),
            total: scalar(v.total),
        }
    }

    /// Runs the disambiguation layer alone on one unpadded sequence.
    pub fn disambiguate(&self, toks: &[TokenId]) -> Result<Disambiguation, ModelError> {
        if toks.is_empty() || toks.len() > self.config.seq_len {
            return Err(ModelError::Batch(format!(
                "sequence length {} outside 1..={}",
                toks.len(),
                self.config.seq_len
            )));
        }
        if let Some(t) = toks.iter().find(|&&t| t as usize >= self.inventory.num_tokens()) {
            return Err(ModelError::Batch(format!("token id {t} outside the vocabulary")));
        }
        let mut g = Graph::<f32>::new();
        let vars = self.params.bind(&mut g);
        let l = &self.layout;
        let key_len = [toks.len()];
        let enc_in =
            EncoderInput { cfg: &self.config, vars: &vars, rows: 1, len: toks.len(), key_len: &key_len, train: false };
        let pos = g.gather_rows(vars[l.position_embeddings.0], Rc::new((0..toks.len()).collect()))?;
        let sl = self.sense_layout(toks);
        let (x, erows) = self.input_layer(&mut g, &vars, &sl)?;
        let h = g.add(x, pos)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y_d = encode(&mut g, &enc_in, &l.disamb, h, &mut rng)?;
        let q = self.sense_distribution(&mut g, &vars, y_d, erows, sl.ids.clone(), sl.owner.clone(), sl.seg.clone())?;
        let x_p = g.segment_weighted_sum(q, erows, sl.seg.clone())?;
        let qd = g.value(q).data();
        let q_d = sl.seg.iter().map(|r| qd[r].to_vec()).collect();
        Ok(Disambiguation { y_d: g.value(y_d).clone(), q_d, x_p: g.value(x_p).clone() })
    }

    /// x(w) for one token, computed directly from the parameters.
    pub fn input_representation(&self, tok: TokenId) -> Result<Vec<f32>, ModelError> {
        if tok as usize >= self.inventory.num_tokens() {
            return Err(ModelError::Batch(format!("token id {tok} outside the vocabulary")));
        }
        let r = self.inventory.senses(tok);
        let e = self.params.get(self.layout.sense_embeddings);
        if r.len() == 1 {
            return Ok(e.row(r.start).to_vec());
        }
        let mix = &self.params.get(self.layout.mixture_logits).data()[r.clone()];
        let mut lambda = vec![0.0f32; r.len()];
        softmax_into(mix, &mut lambda);
        let mut x = vec![0.0f32; self.config.d_model];
        for (w, s) in lambda.iter().zip(r) {
            for (acc, &v) in x.iter_mut().zip(e.row(s)) {
                *acc += w * v;
            }
        }
        Ok(x)
    }
}

/// The model's total loss on a fixed batch, for gradient checking. The
/// stop-gradient target of the match loss is frozen at the construction
/// point, so finite differences see the same surrogate the backward pass
/// differentiates.
pub struct LossObjective<'a> {
    model: &'a PolyLm,
    batch: &'a MaskedBatch,
    opts: ForwardOptions,
}

impl<'a> LossObjective<'a> {
    pub fn new(model: &'a PolyLm, batch: &'a MaskedBatch, opts: ForwardOptions) -> Result<Self, ModelError> {
        let mut opts = ForwardOptions { train: false, frozen_q_p: None, ..opts };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = model.forward_with(&model.params.cast::<f64>(), batch, &opts, &mut rng)?;
        opts.frozen_q_p = Some(base.outputs.q_p.concat());
        Ok(LossObjective { model, batch, opts })
    }
}

impl Objective for LossObjective<'_> {
    fn loss<T: Float>(&self, _params: &ParamStore<T>, g: &mut Graph<T>, vars: &[Var]) -> Result<Var, NumericsError> {
        // Dropout is off, so the generator is never drawn from.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match self.model.build_loss(g, vars, self.batch, &self.opts, &mut rng) {
            Ok(v) => Ok(v.total),
            Err(ModelError::Numerics(e)) => Err(e),
            Err(e) => Err(NumericsError::Shape(e.to_string())),
        }
    }
}
