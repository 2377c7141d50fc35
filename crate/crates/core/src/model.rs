//! The assembled memory network: one interaction step, batched window
//! processing for training and evaluation, and checkpoints.
//!
//! Per interaction: address the memory with the question key, read it through
//! the graph convolution, summarize the window's past with the GRU, predict,
//! encode the answer status into the update vector, write, decay.
//!
//! Batched processing sorts students by log length (longest first). Windows
//! are aligned by index, so at every window slot the students still active
//! form a prefix of the batch and all memories can be stacked into one
//! `(B*N) x d_v` matrix that simply loses rows as students finish.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_rows, Real, Tape, Var};
use crate::datasets::{CanonicalDataset, StudentLog};
use crate::error::{Result, TgmnError};
use crate::matrix_io::{parse_matrix, render_matrix};
use crate::params::{gaussian, glorot, Adam, BoundParams, ParamId, ParamStore};
use crate::pretrain::{matrix_checksum, KeyEmbeddings};
use crate::seqctx::{project_on, run_gru_on, Dropout, GruLayerVars};
use crate::tgm::{
    adjacency_on, decay_factors, decay_on, propagation_on, read_on, relevancy, update_on, GateVars, ReadVars, Readout,
};

pub const BCE_EPSILON: f64 = 1e-7;
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "TGMN-CHECKPOINT";

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "Base")]
    Base,
    #[serde(rename = "TGMN-SC")]
    TgmnSc,
    #[serde(rename = "TGMN-F")]
    TgmnF,
    #[serde(rename = "TGMN")]
    Tgmn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::TgmnSc, Variant::TgmnF, Variant::Tgmn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::TgmnSc => "TGMN-SC",
            Variant::TgmnF => "TGMN-F",
            Variant::Tgmn => "TGMN",
        }
    }

    pub fn sequence_context(self) -> bool {
        self != Variant::Base
    }

    pub fn decay(self) -> bool {
        matches!(self, Variant::TgmnF | Variant::Tgmn)
    }

    /// Whether the update vector encodes the predicted bit next to the answer.
    pub fn status_encoding(self) -> bool {
        self == Variant::Tgmn
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = TgmnError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| TgmnError::Argument(format!("unknown variant `{s}` (expected Base, TGMN-SC, TGMN-F or TGMN)")))
    }
}

/// Where truncated back-propagation cuts the graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bptt {
    /// One optimizer step per window; memory enters the next window as a constant.
    #[default]
    Window,
    /// One optimizer step per batch over complete logs.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_v: usize,
    pub window: usize,
    pub gamma: f64,
    pub tau: f64,
    pub mask_quantile: f64,
    pub gcn_layers: usize,
    pub gru_layers: usize,
    pub dropout: f64,
    pub sigma_init: f64,
    pub readout: Readout,
    pub bptt: Bptt,
    pub variant: Variant,
    /// Variants without status encoding write `u = m` and never see the
    /// answer. Off by default: such variants add the actual-answer row.
    #[serde(default)]
    pub answer_blind_ablation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_v: 512,
            window: 15,
            gamma: 0.02,
            tau: 1.0,
            mask_quantile: 0.25,
            gcn_layers: 2,
            gru_layers: 2,
            dropout: 0.2,
            sigma_init: 0.1,
            readout: Readout::Flatten,
            bptt: Bptt::Window,
            variant: Variant::Tgmn,
            answer_blind_ablation: false,
        }
    }
}

impl ModelConfig {
    /// Whether the update vector carries an answer-status row.
    pub fn adds_status(&self) -> bool {
        self.variant.status_encoding() || !self.answer_blind_ablation
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TgmnError::Argument(m));
        if self.d_v == 0 || self.window == 0 || self.gru_layers == 0 {
            return bad("d_v, window and gru_layers must be >= 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.mask_quantile > 0.0 && self.mask_quantile < 1.0) {
            return bad(format!("mask_quantile must lie in (0, 1), got {}", self.mask_quantile));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.sigma_init >= 0.0 && self.sigma_init.is_finite()) {
            return bad(format!("sigma_init must be finite and >= 0, got {}", self.sigma_init));
        }
        Ok(())
    }
}

/// Sinusoidal rows for positions `0..4`: entry `2i` is `sin(p / 10000^(2i/d))`,
/// entry `2i+1` the matching cosine.
pub fn status_matrix<T: Real>(dim: usize) -> Array2<T> {
    Array2::from_shape_fn((4, dim), |(p, j)| {
        let i = (j / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
        T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Row of the status matrix for a (predicted, actual) pair.
pub fn status_index(predicted: u8, actual: u8) -> usize {
    2 * predicted as usize + actual as usize
}

/// Mean clamped binary cross-entropy.
pub fn loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(TgmnError::Argument(format!(
            "loss needs aligned non-empty inputs, got {} probabilities and {} labels",
            probs.len(),
            labels.len()
        )));
    }
    Ok(crate::autodiff::bce_value(
        probs.iter().copied(),
        labels.iter().map(|&a| a as f64),
        BCE_EPSILON,
    ))
}

#[derive(Clone, Copy, Debug)]
struct GruIds {
    w_i: [ParamId; 3],
    w_h: [ParamId; 3],
    b_i: [ParamId; 3],
    b_h: [ParamId; 3],
}

#[derive(Clone, Debug)]
struct ModelIds {
    queries: ParamId,
    gcn: Vec<ParamId>,
    read_w: ParamId,
    read_b: ParamId,
    gru: Vec<GruIds>,
    pred_w: ParamId,
    pred_b: ParamId,
    erase_w: ParamId,
    erase_b: ParamId,
    add_w: ParamId,
    add_b: ParamId,
}

/// Constant lookups derived from the frozen keys.
#[derive(Clone, Debug)]
struct Tables<T> {
    /// `L x N` relevancy of each question over KCs.
    relevancy: Array2<T>,
    /// `L x N` decay multipliers.
    decay: Array2<T>,
    /// `L x L` tempered question-question logits.
    question_logits: Array2<T>,
    /// `d_k x N`.
    kc_keys_t: Array2<T>,
}

/// Per-tape handles for all weights.
struct Ctx {
    prop: Var,
    adjacency: Var,
    read: ReadVars,
    gates: GateVars,
    gru: Vec<GruLayerVars>,
    pred_w: Var,
    pred_b: Var,
}

struct SlotOut {
    prob: Var,
    values: Var,
    u: Var,
    proj: Option<[Var; 3]>,
    w: Array1<f64>,
}

/// One student's evolving state for [`TgmnModel::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StudentState<T> {
    pub values: Array2<T>,
    /// Questions answered so far in the current window.
    pub past_questions: Vec<usize>,
    /// Their update vectors.
    pub past_updates: Vec<Array1<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T> {
    pub prob: f64,
    pub u: Array1<T>,
    pub w: Array1<f64>,
    pub m: Array1<T>,
    pub adjacency: Array2<T>,
    pub entropy: f64,
    pub memory_norm: f64,
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Optimizer state for [`TgmnModel::process_batch`].
pub struct Training<'a, T> {
    pub adam: &'a mut Adam<T>,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchResult {
    /// Predicted probabilities per input log, in interaction order.
    pub probs: Vec<Vec<f64>>,
    pub loss_sum: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    real: String,
    num_questions: usize,
    num_kcs: usize,
    d_k: usize,
    d_v: usize,
    window: usize,
    gamma: f64,
    tau: f64,
    mask_quantile: f64,
    config: ModelConfig,
    tensors: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TgmnModel<T: Real> {
    config: ModelConfig,
    keys: KeyEmbeddings,
    a_status: Array2<T>,
    value_init: Array2<T>,
    params: ParamStore<T>,
    ids: ModelIds,
    tables: Tables<T>,
}

impl<T: Real> TgmnModel<T> {
    pub fn new(keys: KeyEmbeddings, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = keys.kc_keys.nrows();
        let d_k = keys.d_k();
        if n == 0 || keys.question_keys.nrows() == 0 {
            return Err(TgmnError::Argument("keys must cover at least one question and one KC".into()));
        }
        if keys.question_keys.ncols() != d_k {
            return Err(TgmnError::shape("question_keys", d_k, keys.question_keys.ncols()));
        }
        if keys.question_keys.iter().chain(keys.kc_keys.iter()).any(|v| !v.is_finite()) {
            return Err(TgmnError::Numeric("non-finite key embedding".into()));
        }
        let d_v = config.d_v;
        let d_m = 2 * d_v;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let queries = p.add("queries", glorot(n, d_k, &mut rng));
        let gcn = (0..config.gcn_layers)
            .map(|j| p.add(format!("gcn{j}"), glorot(d_v, d_v, &mut rng)))
            .collect();
        let read_in = config.readout.input_dim(n, d_v);
        let read_w = p.add("read_w", glorot(read_in, d_v, &mut rng));
        let read_b = p.add("read_b", Array2::zeros((1, d_v)));
        let gru = (0..config.gru_layers)
            .map(|l| {
                let input = if l == 0 { d_m } else { d_v };
                let gates = ["r", "z", "n"];
                GruIds {
                    w_i: [0, 1, 2].map(|g| p.add(format!("gru{l}_wi{}", gates[g]), glorot(input, d_v, &mut rng))),
                    w_h: [0, 1, 2].map(|g| p.add(format!("gru{l}_wh{}", gates[g]), glorot(d_v, d_v, &mut rng))),
                    b_i: [0, 1, 2].map(|g| p.add(format!("gru{l}_bi{}", gates[g]), Array2::zeros((1, d_v)))),
                    b_h: [0, 1, 2].map(|g| p.add(format!("gru{l}_bh{}", gates[g]), Array2::zeros((1, d_v)))),
                }
            })
            .collect();
        let pred_w = p.add("pred_w", glorot(d_m, 1, &mut rng));
        let pred_b = p.add("pred_b", Array2::zeros((1, 1)));
        let erase_w = p.add("erase_w", glorot(d_m, d_v, &mut rng));
        let erase_b = p.add("erase_b", Array2::zeros((1, d_v)));
        let add_w = p.add("add_w", glorot(d_m, d_v, &mut rng));
        let add_b = p.add("add_b", Array2::zeros((1, d_v)));
        let value_init = gaussian(n, d_v, config.sigma_init, &mut rng);
        let tables = Tables::build(&keys, &config);
        Ok(TgmnModel {
            a_status: status_matrix(d_m),
            value_init,
            params: p,
            ids: ModelIds {
                queries,
                gcn,
                read_w,
                read_b,
                gru,
                pred_w,
                pred_b,
                erase_w,
                erase_b,
                add_w,
                add_b,
            },
            tables,
            keys,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn keys(&self) -> &KeyEmbeddings {
        &self.keys
    }

    pub fn num_questions(&self) -> usize {
        self.keys.question_keys.nrows()
    }

    pub fn num_kcs(&self) -> usize {
        self.keys.kc_keys.nrows()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn status_encoding_matrix(&self) -> &Array2<T> {
        &self.a_status
    }

    pub fn value_init(&self) -> &Array2<T> {
        &self.value_init
    }

    /// Checksum over everything training must leave untouched.
    pub fn frozen_checksum(&self) -> u64 {
        let to64 = |a: &Array2<T>| a.mapv(|v| v.to_f64().unwrap());
        matrix_checksum(&[
            &self.keys.question_keys,
            &self.keys.kc_keys,
            &to64(&self.a_status),
            &to64(&self.value_init),
        ])
    }

    /// Fails when the dataset's id ranges differ from the model's.
    pub fn check_dataset(&self, dataset: &CanonicalDataset) -> Result<()> {
        if dataset.num_kcs != self.num_kcs() {
            return Err(TgmnError::shape("num_kcs", self.num_kcs(), dataset.num_kcs));
        }
        if dataset.num_questions != self.num_questions() {
            return Err(TgmnError::shape("num_questions", self.num_questions(), dataset.num_questions));
        }
        Ok(())
    }

    /// Answer probability from a mastery vector of length `2 d_v`.
    pub fn predict_answer(&self, m: &[T]) -> Result<f64> {
        let d_m = 2 * self.config.d_v;
        if m.len() != d_m {
            return Err(TgmnError::shape("m", d_m, m.len()));
        }
        let w = self.params.get(self.ids.pred_w);
        let logit = m.iter().zip(w.iter()).fold(self.params.get(self.ids.pred_b)[[0, 0]], |acc, (&a, &b)| acc + a * b);
        Ok(sigmoid(logit).to_f64().unwrap())
    }

    pub fn new_student(&self) -> StudentState<T> {
        StudentState {
            values: self.value_init.clone(),
            past_questions: Vec::new(),
            past_updates: Vec::new(),
        }
    }

    fn ctx(&self, tape: &mut Tape<T>, bound: &BoundParams) -> Ctx {
        let kt = tape.constant(self.tables.kc_keys_t.clone());
        let adjacency = adjacency_on(tape, bound.var(self.ids.queries), kt);
        let prop = propagation_on(tape, adjacency, self.config.mask_quantile);
        let v = |id| bound.var(id);
        Ctx {
            prop,
            adjacency,
            read: ReadVars {
                gcn: self.ids.gcn.iter().map(|&id| v(id)).collect(),
                head_w: v(self.ids.read_w),
                head_b: v(self.ids.read_b),
                readout: self.config.readout,
            },
            gates: GateVars {
                erase_w: v(self.ids.erase_w),
                erase_b: v(self.ids.erase_b),
                add_w: v(self.ids.add_w),
                add_b: v(self.ids.add_b),
            },
            gru: self
                .ids
                .gru
                .iter()
                .map(|g| GruLayerVars {
                    w_i: g.w_i.map(v),
                    w_h: g.w_h.map(v),
                    b_i: g.b_i.map(v),
                    b_h: g.b_h.map(v),
                })
                .collect(),
            pred_w: v(self.ids.pred_w),
            pred_b: v(self.ids.pred_b),
        }
    }

    /// One interaction for `questions.len()` students at the same window
    /// position. `pasts[b]` lists student `b`'s earlier questions in the
    /// window; `past_proj[i]` holds the first GRU layer's input projections of
    /// their update vectors at position `i` (at least `B` rows).
    #[allow(clippy::too_many_arguments)]
    fn slot_on(
        &self,
        tape: &mut Tape<T>,
        ctx: &Ctx,
        values: Var,
        questions: &[usize],
        answers: &[u8],
        pasts: &[&[usize]],
        past_proj: &[[Var; 3]],
        rng: Option<&mut ChaCha8Rng>,
    ) -> SlotOut {
        let batch = questions.len();
        let t = past_proj.len();
        let d_v = self.config.d_v;
        let variant = self.config.variant;
        let w_rows = self.tables.relevancy.select(Axis(0), questions);
        let w = Array1::from_iter(w_rows.iter().copied());
        let (r, _) = read_on(tape, ctx.prop, values, &w, &ctx.read);

        let h = if variant.sequence_context() && t > 0 {
            let logits = Array2::from_shape_fn((batch, t), |(b, i)| self.tables.question_logits[[questions[b], pasts[b][i]]]);
            let o = softmax_rows(&logits.view());
            let inputs: Vec<[Var; 3]> = (0..t)
                .map(|i| {
                    let col = o.column(i).to_owned();
                    past_proj[i].map(|p| {
                        let p = tape.slice_rows(p, 0, batch);
                        tape.scale_rows(p, col.clone())
                    })
                })
                .collect();
            let dropout = match rng {
                Some(rng) if self.config.dropout > 0.0 => Some(Dropout {
                    rate: self.config.dropout,
                    rng,
                }),
                _ => None,
            };
            run_gru_on(tape, &ctx.gru, &inputs, batch, dropout)
        } else {
            tape.constant(Array2::zeros((batch, d_v)))
        };

        let m = tape.concat_cols(&[r, h]);
        let logit = tape.matmul(m, ctx.pred_w);
        let logit = tape.add_row(logit, ctx.pred_b);
        let prob = tape.sigmoid(logit);

        let half = T::of(0.5);
        let rows: Vec<usize> = (0..batch)
            .map(|b| {
                if variant.status_encoding() {
                    let predicted = u8::from(tape.value(prob)[[b, 0]] >= half);
                    status_index(predicted, answers[b])
                } else {
                    status_index(0, answers[b])
                }
            })
            .collect();
        let u = if self.config.adds_status() {
            let status = tape.constant(self.a_status.select(Axis(0), &rows));
            tape.add(m, status)
        } else {
            m
        };
        let proj = variant.sequence_context().then(|| project_on(tape, &ctx.gru[0], u));

        let mut values = update_on(tape, values, u, &w, &ctx.gates);
        if variant.decay() {
            let f = self.tables.decay.select(Axis(0), questions);
            values = decay_on(tape, values, Array1::from_iter(f.iter().copied()));
        }
        SlotOut {
            prob,
            values,
            u,
            proj,
            w: w.mapv(|v| v.to_f64().unwrap()),
        }
    }

    /// Advances one student by one interaction. The returned probability is
    /// computed before the answer is used.
    pub fn step(&self, state: &StudentState<T>, question: usize, answer: u8, mode: Mode<'_>) -> Result<(StepOutput<T>, StudentState<T>)> {
        if question >= self.num_questions() {
            return Err(TgmnError::UnknownQuestion(question));
        }
        if answer > 1 {
            return Err(TgmnError::Argument(format!("answer must be 0 or 1, got {answer}")));
        }
        let mut state = state.clone();
        if state.past_questions.len() >= self.config.window {
            state.past_questions.clear();
            state.past_updates.clear();
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let ctx = self.ctx(&mut tape, &bound);
        let values = tape.constant(state.values.clone());
        let past_proj: Vec<[Var; 3]> = state
            .past_updates
            .iter()
            .map(|u| {
                let x = tape.constant(u.clone().insert_axis(Axis(0)));
                project_on(&mut tape, &ctx.gru[0], x)
            })
            .collect();
        let rng = match mode {
            Mode::Eval => None,
            Mode::Train(rng) => Some(rng),
        };
        let pasts = [state.past_questions.as_slice()];
        let out = self.slot_on(&mut tape, &ctx, values, &[question], &[answer], &pasts, &past_proj, rng);
        let w = out.w.clone();
        let entropy = -w.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        let new_values = tape.value(out.values).clone();
        let u = tape.value(out.u).row(0).to_owned();
        let d_v = self.config.d_v;
        let m = if self.config.adds_status() {
            &u - &self.a_status.row(self.status_row(tape.scalar(out.prob), answer))
        } else {
            u.clone()
        };
        debug_assert_eq!(m.len(), 2 * d_v);
        let output = StepOutput {
            prob: tape.scalar(out.prob).to_f64().unwrap(),
            m,
            u: u.clone(),
            w,
            adjacency: tape.value(ctx.adjacency).clone(),
            entropy,
            memory_norm: new_values.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt(),
        };
        state.values = new_values;
        state.past_questions.push(question);
        state.past_updates.push(u);
        Ok((output, state))
    }

    fn status_row(&self, prob: T, answer: u8) -> usize {
        if self.config.variant.status_encoding() {
            status_index(u8::from(prob >= T::of(0.5)), answer)
        } else {
            status_index(0, answer)
        }
    }

    /// Runs one window for a batch. `windows` must be sorted by length,
    /// longest first; `values` stacks the students' memories in that order.
    /// Returns per-slot probability columns and the memory after the last slot.
    fn window_on(
        &self,
        tape: &mut Tape<T>,
        ctx: &Ctx,
        mut values: Var,
        windows: &[&[(usize, u8)]],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<Var>, Var) {
        let n = self.num_kcs();
        let len = windows[0].len();
        let mut probs = Vec::with_capacity(len);
        let mut past_proj: Vec<[Var; 3]> = Vec::with_capacity(len);
        let mut past_questions: Vec<Vec<usize>> = vec![Vec::new(); windows.len()];
        for t in 0..len {
            let active = windows.iter().take_while(|w| w.len() > t).count();
            values = tape.slice_rows(values, 0, active * n);
            let questions: Vec<usize> = windows[..active].iter().map(|w| w[t].0).collect();
            let answers: Vec<u8> = windows[..active].iter().map(|w| w[t].1).collect();
            let pasts: Vec<&[usize]> = past_questions[..active].iter().map(Vec::as_slice).collect();
            let out = self.slot_on(tape, ctx, values, &questions, &answers, &pasts, &past_proj, rng.as_deref_mut());
            values = out.values;
            probs.push(out.prob);
            if let Some(p) = out.proj {
                past_proj.push(p);
            }
            for (b, q) in questions.iter().enumerate() {
                past_questions[b].push(*q);
            }
        }
        (probs, values)
    }

    /// Runs a batch of complete logs, optionally training on it. Probabilities
    /// are returned as computed during the pass.
    pub fn process_batch(&mut self, logs: &[&StudentLog], mut training: Option<Training<'_, T>>) -> Result<BatchResult> {
        for log in logs {
            if log.interactions.is_empty() {
                return Err(TgmnError::Argument(format!("student {} has an empty log", log.student_id)));
            }
            if let Some(it) = log.interactions.iter().find(|it| it.question >= self.num_questions()) {
                return Err(TgmnError::UnknownQuestion(it.question));
            }
        }
        let mut result = BatchResult {
            probs: logs.iter().map(|l| Vec::with_capacity(l.interactions.len())).collect(),
            ..BatchResult::default()
        };
        if logs.is_empty() {
            return Ok(result);
        }
        let mut order: Vec<usize> = (0..logs.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(logs[i].interactions.len()));
        let sorted: Vec<Vec<(usize, u8)>> = order
            .iter()
            .map(|&i| logs[i].interactions.iter().map(|it| (it.question, it.answer)).collect())
            .collect();
        let s_len = self.config.window;
        let n = self.num_kcs();
        let num_windows = sorted[0].len().div_ceil(s_len);
        let window_slices = |k: usize| -> Vec<&[(usize, u8)]> {
            sorted
                .iter()
                .take_while(|seq| seq.len() > k * s_len)
                .map(|seq| &seq[k * s_len..seq.len().min((k + 1) * s_len)])
                .collect()
        };
        let record = |result: &mut BatchResult, tape: &Tape<T>, probs: &[Var]| {
            for &p in probs {
                for (b, v) in tape.value(p).iter().enumerate() {
                    result.probs[order[b]].push(v.to_f64().unwrap());
                }
            }
        };
        let stacked_init = {
            let views: Vec<_> = (0..logs.len()).map(|_| self.value_init.view()).collect();
            concatenate(Axis(0), &views).expect("equal widths")
        };
        let full = self.config.bptt == Bptt::Full && training.is_some();
        if full {
            let tr = training.as_mut().expect("checked");
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape);
            let ctx = self.ctx(&mut tape, &bound);
            let mut values = tape.constant(stacked_init);
            let mut all_probs = Vec::new();
            let mut labels = Vec::new();
            for k in 0..num_windows {
                let windows = window_slices(k);
                values = tape.slice_rows(values, 0, windows.len() * n);
                let (probs, v) = self.window_on(&mut tape, &ctx, values, &windows, Some(tr.rng));
                values = v;
                for t in 0..probs.len() {
                    labels.extend(windows.iter().take_while(|w| w.len() > t).map(|w| T::of(w[t].1 as f64)));
                }
                record(&mut result, &tape, &probs);
                all_probs.extend(probs);
            }
            let probs = tape.concat_rows(&all_probs);
            self.optimize(&mut tape, &bound, probs, &labels, tr, &mut result, logs)?;
            return Ok(result);
        }

        let mut state = stacked_init;
        for k in 0..num_windows {
            let windows = window_slices(k);
            let rows = windows.len() * n;
            let mut tape = Tape::new();
            let bound = match training {
                Some(_) => self.params.bind(&mut tape),
                None => self.params.bind_frozen(&mut tape),
            };
            let ctx = self.ctx(&mut tape, &bound);
            let values = tape.constant(state.slice(s![..rows, ..]).to_owned());
            let rng = training.as_mut().map(|tr| &mut *tr.rng);
            let (probs, last) = self.window_on(&mut tape, &ctx, values, &windows, rng);
            record(&mut result, &tape, &probs);
            let mut labels = Vec::new();
            for t in 0..probs.len() {
                labels.extend(windows.iter().take_while(|w| w.len() > t).map(|w| T::of(w[t].1 as f64)));
            }
            let next = tape.value(last).clone();
            let probs_col = tape.concat_rows(&probs);
            match training.as_mut() {
                Some(tr) => self.optimize(&mut tape, &bound, probs_col, &labels, tr, &mut result, logs)?,
                None => {
                    let l = crate::autodiff::bce_value(
                        tape.value(probs_col).iter().copied(),
                        labels.iter().copied(),
                        T::of(BCE_EPSILON),
                    );
                    result.loss_sum += l.to_f64().unwrap() * labels.len() as f64;
                    result.count += labels.len();
                }
            }
            state = next;
        }
        Ok(result)
    }

    #[allow(clippy::too_many_arguments)]
    fn optimize(
        &mut self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        probs: Var,
        labels: &[T],
        tr: &mut Training<'_, T>,
        result: &mut BatchResult,
        logs: &[&StudentLog],
    ) -> Result<()> {
        let loss = tape.bce(probs, labels, T::of(BCE_EPSILON));
        let value = tape.scalar(loss).to_f64().unwrap();
        if !value.is_finite() {
            return Err(TgmnError::NonFiniteLoss {
                epoch: 0,
                students: logs.iter().map(|l| l.student_id).collect(),
            });
        }
        let grads = tape.backward(loss);
        let grads = self.params.collect_grads(bound, &grads);
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(TgmnError::NonFiniteLoss {
                epoch: 0,
                students: logs.iter().map(|l| l.student_id).collect(),
            });
        }
        tr.adam.step(&mut self.params, &grads);
        result.loss_sum += value * labels.len() as f64;
        result.count += labels.len();
        Ok(())
    }

    /// Mean loss of a batch of logs on a caller-owned tape with the given
    /// bound parameters, for gradient checks. Dropout is off; memory is carried
    /// across windows on the tape.
    pub fn loss_on(&self, tape: &mut Tape<T>, bound: &BoundParams, logs: &[&StudentLog]) -> Var {
        let mut order: Vec<usize> = (0..logs.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(logs[i].interactions.len()));
        let sorted: Vec<Vec<(usize, u8)>> = order
            .iter()
            .map(|&i| logs[i].interactions.iter().map(|it| (it.question, it.answer)).collect())
            .collect();
        let s_len = self.config.window;
        let n = self.num_kcs();
        let ctx = self.ctx(tape, bound);
        let views: Vec<_> = (0..logs.len()).map(|_| self.value_init.view()).collect();
        let mut values = tape.constant(concatenate(Axis(0), &views).expect("equal widths"));
        let mut all = Vec::new();
        let mut labels = Vec::new();
        for k in 0..sorted[0].len().div_ceil(s_len) {
            let windows: Vec<&[(usize, u8)]> = sorted
                .iter()
                .take_while(|seq| seq.len() > k * s_len)
                .map(|seq| &seq[k * s_len..seq.len().min((k + 1) * s_len)])
                .collect();
            values = tape.slice_rows(values, 0, windows.len() * n);
            let (probs, v) = self.window_on(tape, &ctx, values, &windows, None);
            values = v;
            for t in 0..probs.len() {
                labels.extend(windows.iter().take_while(|w| w.len() > t).map(|w| T::of(w[t].1 as f64)));
            }
            all.extend(probs);
        }
        let probs = tape.concat_rows(&all);
        tape.bce(probs, &labels, T::of(BCE_EPSILON))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            real: T::NAME.to_string(),
            num_questions: self.num_questions(),
            num_kcs: self.num_kcs(),
            d_k: self.keys.d_k(),
            d_v: self.config.d_v,
            window: self.config.window,
            gamma: self.config.gamma,
            tau: self.config.tau,
            mask_quantile: self.config.mask_quantile,
            config: self.config.clone(),
            tensors: self.params.iter().map(|(n, _)| n.to_string()).collect(),
        };
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{}\n", serde_json::to_string(&manifest)?);
        let mut section = |name: &str, body: String| {
            out.push('@');
            out.push_str(name);
            out.push('\n');
            out.push_str(&body);
        };
        section("question_keys", render_matrix(&self.keys.question_keys));
        section("kc_keys", render_matrix(&self.keys.kc_keys));
        section("status_encoding", render_matrix(&self.a_status));
        section("value_init", render_matrix(&self.value_init));
        for (name, value) in self.params.iter() {
            section(name, render_matrix(value));
        }
        out.push_str("@end\n");
        fs::write(path, out).map_err(|e| TgmnError::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TgmnError::io(path, e))?;
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, head) = lines.next().ok_or_else(|| TgmnError::format(path, 1, "empty checkpoint"))?;
        let version = head
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| TgmnError::format(path, 1, format!("expected `{CHECKPOINT_MAGIC} <version>`")))?;
        if version != CHECKPOINT_VERSION {
            return Err(TgmnError::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let (line, json) = lines.next().ok_or_else(|| TgmnError::format(path, 2, "missing manifest"))?;
        let manifest: Manifest =
            serde_json::from_str(json).map_err(|e| TgmnError::format(path, line, format!("bad manifest: {e}")))?;
        if manifest.real != T::NAME {
            return Err(TgmnError::format(
                path,
                line,
                format!("checkpoint stores {} values, reader expects {}", manifest.real, T::NAME),
            ));
        }
        expect_section_with(&mut lines, path, "question_keys")?;
        let question_keys: Array2<f64> = parse_matrix(&mut lines, path)?;
        expect_section_with(&mut lines, path, "kc_keys")?;
        let kc_keys: Array2<f64> = parse_matrix(&mut lines, path)?;
        let keys = KeyEmbeddings { question_keys, kc_keys };
        check_dims("question_keys", (manifest.num_questions, manifest.d_k), keys.question_keys.dim())?;
        check_dims("kc_keys", (manifest.num_kcs, manifest.d_k), keys.kc_keys.dim())?;
        let mut model = TgmnModel::<T>::new(keys, manifest.config.clone(), 0)?;
        expect_section_with(&mut lines, path, "status_encoding")?;
        let a_status: Array2<T> = parse_matrix(&mut lines, path)?;
        check_dims("status_encoding", model.a_status.dim(), a_status.dim())?;
        model.a_status = a_status;
        expect_section_with(&mut lines, path, "value_init")?;
        let value_init: Array2<T> = parse_matrix(&mut lines, path)?;
        check_dims("value_init", model.value_init.dim(), value_init.dim())?;
        model.value_init = value_init;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        if names != manifest.tensors {
            return Err(TgmnError::format(path, line, "manifest tensor list does not match the configured model"));
        }
        for name in &names {
            expect_section_with(&mut lines, path, name)?;
            let value: Array2<T> = parse_matrix(&mut lines, path)?;
            let id = model.params.id(name).expect("name from store");
            check_dims(name, model.params.get(id).dim(), value.dim())?;
            *model.params.get_mut(id) = value;
        }
        expect_section_with(&mut lines, path, "end")?;
        Ok(model)
    }
}

/// Central finite-difference check of [`TgmnModel::loss_on`] for every
/// parameter tensor. Returns `(name, relative error)` with the error measured
/// as `|g - g_fd| / max(|g| + |g_fd|, 1e-12)` in the 2-norm.
pub fn gradient_check(model: &TgmnModel<f64>, logs: &[&StudentLog], step: f64) -> Vec<(String, f64)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let loss = model.loss_on(&mut tape, &bound, logs);
    let analytic = model.params.collect_grads(&bound, &tape.backward(loss));
    let eval = |params: &ParamStore<f64>| {
        let mut probe = model.clone();
        probe.params = params.clone();
        let mut tape = Tape::new();
        let bound = probe.params.bind_frozen(&mut tape);
        let l = probe.loss_on(&mut tape, &bound, logs);
        tape.scalar(l)
    };
    let mut params = model.params.clone();
    let mut report = Vec::new();
    for (k, id) in model.params.ids().enumerate() {
        let mut numeric = Array2::zeros(params.get(id).dim());
        for idx in 0..numeric.len() {
            let (r, c) = (idx / numeric.ncols(), idx % numeric.ncols());
            let orig = params.get(id)[[r, c]];
            params.get_mut(id)[[r, c]] = orig + step;
            let up = eval(&params);
            params.get_mut(id)[[r, c]] = orig - step;
            let down = eval(&params);
            params.get_mut(id)[[r, c]] = orig;
            numeric[[r, c]] = (up - down) / (2.0 * step);
        }
        let norm = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = norm(&(&analytic[k] - &numeric));
        let scale = (norm(&analytic[k]) + norm(&numeric)).max(1e-12);
        report.push((model.params.name(id).to_string(), diff / scale));
    }
    report
}

fn expect_section_with<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, path: &Path, name: &str) -> Result<()> {
    match lines.next() {
        Some((_, l)) if l.strip_prefix('@') == Some(name) => Ok(()),
        Some((no, l)) => Err(TgmnError::format(path, no, format!("expected section `@{name}`, found `{l}`"))),
        None => Err(TgmnError::format(path, 0, format!("file truncated before section `@{name}`"))),
    }
}

fn check_dims(field: &str, expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(TgmnError::shape(field, format!("{expected:?}"), format!("{found:?}")));
    }
    Ok(())
}

impl<T: Real> Tables<T> {
    fn build(keys: &KeyEmbeddings, config: &ModelConfig) -> Self {
        let rel = relevancy(keys.question_keys.view(), keys.kc_keys.view(), config.tau);
        let mut decay = Array2::zeros(rel.dim());
        for (q, row) in rel.outer_iter().enumerate() {
            decay.row_mut(q).assign(&decay_factors(row, config.gamma));
        }
        let question_logits = keys.question_keys.dot(&keys.question_keys.t()) / config.tau;
        let cast = |a: &Array2<f64>| a.mapv(T::of);
        Tables {
            relevancy: cast(&rel),
            decay: cast(&decay),
            question_logits: cast(&question_logits),
            kc_keys_t: cast(&keys.kc_keys.t().to_owned()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use crate::datasets::Interaction;
    use crate::tgm::tests::{oracle_address, oracle_read, oracle_softmax, oracle_update};
    use crate::tgm::TemporalGraphMemory;
    use ndarray::array;
    use rand::Rng;

    pub(crate) fn toy_keys(l: usize, n: usize, d_k: usize, seed: u64) -> KeyEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KeyEmbeddings {
            question_keys: gaussian(l, d_k, 1.0, &mut rng),
            kc_keys: gaussian(n, d_k, 1.0, &mut rng),
        }
    }

    pub(crate) fn toy_config(d_v: usize, window: usize, variant: Variant) -> ModelConfig {
        ModelConfig {
            d_v,
            window,
            dropout: 0.0,
            variant,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn toy_log(id: u64, len: usize, l: usize, seed: u64) -> StudentLog {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StudentLog {
            student_id: id,
            interactions: (0..len)
                .map(|i| Interaction {
                    question: rng.gen_range(0..l),
                    answer: rng.gen_range(0..2),
                    order: i as u64,
                })
                .collect(),
        }
    }

    fn param(model: &TgmnModel<f64>, name: &str) -> Array2<f64> {
        model.params.get(model.params.id(name).unwrap()).clone()
    }

    /// Straight-line reference of one interaction.
    fn reference_step(
        model: &TgmnModel<f64>,
        values: &Array2<f64>,
        past: &[(usize, Vec<f64>)],
        q: usize,
        a: u8,
    ) -> (f64, Array2<f64>, Vec<f64>) {
        let cfg = &model.config;
        let keys = &model.keys;
        let d_v = cfg.d_v;
        let mem = TemporalGraphMemory {
            kc_keys: keys.kc_keys.clone(),
            queries: param(model, "queries"),
            values: values.clone(),
            gcn_weights: (0..cfg.gcn_layers).map(|j| param(model, &format!("gcn{j}"))).collect(),
            read_w: param(model, "read_w"),
            read_b: param(model, "read_b"),
            erase_w: param(model, "erase_w"),
            erase_b: param(model, "erase_b"),
            add_w: param(model, "add_w"),
            add_b: param(model, "add_b"),
            readout: Readout::Flatten,
            tau: cfg.tau,
            gamma: cfg.gamma,
            mask_quantile: cfg.mask_quantile,
        };
        let qk = keys.question_keys.row(q).to_vec();
        let w = oracle_address(&qk, &keys.kc_keys, cfg.tau);
        let r = oracle_read(&mem, &w);

        let mut h = vec![0.0; d_v];
        if cfg.variant.sequence_context() && !past.is_empty() {
            let logits: Vec<f64> = past
                .iter()
                .map(|(pq, _)| (0..qk.len()).map(|c| qk[c] * keys.question_keys[[*pq, c]]).sum::<f64>() / cfg.tau)
                .collect();
            let o = oracle_softmax(&logits);
            let mut states = vec![vec![0.0; d_v]; cfg.gru_layers];
            for (i, (_, u)) in past.iter().enumerate() {
                let mut x: Vec<f64> = u.iter().map(|v| v * o[i]).collect();
                for (l, state) in states.iter_mut().enumerate() {
                    let g = |kind: &str, gate: &str| param(model, &format!("gru{l}_{kind}{gate}"));
                    let lin = |wm: &Array2<f64>, b: &Array2<f64>, v: &[f64], c: usize| {
                        b[[0, c]] + (0..v.len()).map(|k| v[k] * wm[[k, c]]).sum::<f64>()
                    };
                    let mut next = vec![0.0; d_v];
                    for c in 0..d_v {
                        let rg = sigmoid(lin(&g("wi", "r"), &g("bi", "r"), &x, c) + lin(&g("wh", "r"), &g("bh", "r"), state, c));
                        let zg = sigmoid(lin(&g("wi", "z"), &g("bi", "z"), &x, c) + lin(&g("wh", "z"), &g("bh", "z"), state, c));
                        let ng = (lin(&g("wi", "n"), &g("bi", "n"), &x, c) + rg * lin(&g("wh", "n"), &g("bh", "n"), state, c)).tanh();
                        next[c] = (1.0 - zg) * ng + zg * state[c];
                    }
                    *state = next;
                    x = state.clone();
                }
            }
            h = states.last().unwrap().clone();
        }
        let m: Vec<f64> = r.iter().chain(h.iter()).copied().collect();
        let pw = param(model, "pred_w");
        let logit = param(model, "pred_b")[[0, 0]] + (0..m.len()).map(|k| m[k] * pw[[k, 0]]).sum::<f64>();
        let prob = sigmoid(logit);
        let row = if cfg.variant.status_encoding() {
            2 * usize::from(prob >= 0.5) + a as usize
        } else {
            a as usize
        };
        let blind = cfg.answer_blind_ablation && !cfg.variant.status_encoding();
        let u: Vec<f64> = (0..m.len())
            .map(|k| m[k] + if blind { 0.0 } else { model.a_status[[row, k]] })
            .collect();
        let mut next = oracle_update(&mem, &u, &w);
        if cfg.variant.decay() {
            for i in 0..next.nrows() {
                for c in 0..d_v {
                    next[[i, c]] *= (1.0 - cfg.gamma).powf(1.0 - w[i]);
                }
            }
        }
        (prob, next, u)
    }

    #[test]
    fn status_encoding_rows() {
        let a = status_matrix::<f64>(8);
        assert_eq!(a.row(0), array![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(a[[1, 0]], 1f64.sin());
        assert_eq!(a[[1, 3]], (1.0 / 10000f64.powf(2.0 / 8.0)).cos());
        for i in 0..4 {
            for j in 0..i {
                let d: f64 = (&a.row(i) - &a.row(j)).mapv(|v| v * v).sum();
                assert!(d > 0.0);
            }
        }
        assert_eq!(status_index(0, 0), 0);
        assert_eq!(status_index(1, 1), 3);
    }

    #[test]
    fn prediction_head_examples() {
        let mut model = TgmnModel::<f64>::new(toy_keys(5, 3, 4, 0), toy_config(4, 3, Variant::Tgmn), 0).unwrap();
        let pw = model.ids.pred_w;
        let pb = model.ids.pred_b;
        *model.params.get_mut(pw) = Array2::zeros((8, 1));
        assert_eq!(model.predict_answer(&[0.3; 8]).unwrap(), 0.5);
        *model.params.get_mut(pb) = array![[3f64.ln()]];
        assert!((model.predict_answer(&[0.3; 8]).unwrap() - 0.75).abs() < 1e-15);
        *model.params.get_mut(pb) = array![[40.0]];
        assert!(model.predict_answer(&[0.3; 8]).unwrap() > 1.0 - 1e-12);
        assert!(model.predict_answer(&[0.3; 7]).is_err());
    }

    #[test]
    fn loss_examples() {
        assert!((loss(&[0.5], &[1]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let perfect = loss(&[1.0, 0.0], &[1, 0]).unwrap();
        assert!((0.0..1e-6).contains(&perfect));
        assert!(loss(&[], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs: Vec<f64> = (0..50).map(|_| rng.gen_range(0.01..0.99)).collect();
        let labels: Vec<u8> = (0..50).map(|_| rng.gen_range(0..2)).collect();
        let mut total = 0.0;
        for (p, &a) in probs.iter().zip(&labels) {
            total -= if a == 1 { p.ln() } else { (1.0 - p).ln() };
        }
        assert!((loss(&probs, &labels).unwrap() - total / 50.0).abs() < 1e-12);
    }

    #[test]
    fn first_step_has_zero_context() {
        let model = TgmnModel::<f64>::new(toy_keys(5, 3, 4, 1), toy_config(4, 3, Variant::Tgmn), 1).unwrap();
        let (out, _) = model.step(&model.new_student(), 2, 1, Mode::Eval).unwrap();
        assert!(out.m.iter().skip(4).all(|&v| v == 0.0));
        assert_eq!(out.prob, model.predict_answer(out.m.as_slice().unwrap()).unwrap());
        assert!(matches!(model.step(&model.new_student(), 5, 1, Mode::Eval), Err(TgmnError::UnknownQuestion(5))));
    }

    #[test]
    fn closed_gates_leave_memory_unchanged() {
        let mut model = TgmnModel::<f64>::new(toy_keys(5, 3, 4, 2), toy_config(4, 3, Variant::TgmnSc), 2).unwrap();
        let ids = model.ids.clone();
        *model.params.get_mut(ids.erase_w) = Array2::zeros((8, 4));
        *model.params.get_mut(ids.erase_b) = Array2::from_elem((1, 4), -800.0);
        *model.params.get_mut(ids.add_w) = Array2::zeros((8, 4));
        let s0 = model.new_student();
        let (_, s1) = model.step(&s0, 1, 1, Mode::Eval).unwrap();
        assert_eq!(s1.values, s0.values);
    }

    #[test]
    fn steps_match_scalar_reference() {
        for (variant, blind) in Variant::ALL.into_iter().flat_map(|v| [(v, false), (v, true)]) {
            let config = ModelConfig {
                answer_blind_ablation: blind,
                ..toy_config(4, 3, variant)
            };
            let model = TgmnModel::<f64>::new(toy_keys(6, 3, 4, 3), config, 3).unwrap();
            let log = toy_log(0, 7, 6, 4);
            let mut state = model.new_student();
            let mut values = model.value_init.clone();
            let mut past: Vec<(usize, Vec<f64>)> = Vec::new();
            for it in &log.interactions {
                if past.len() == 3 {
                    past.clear();
                }
                let (p_ref, v_ref, u_ref) = reference_step(&model, &values, &past, it.question, it.answer);
                let (out, next) = model.step(&state, it.question, it.answer, Mode::Eval).unwrap();
                assert!((out.prob - p_ref).abs() < 1e-8, "{variant}: {} vs {p_ref}", out.prob);
                let dv = (&next.values - &v_ref).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(dv < 1e-8, "{variant}: memory differs by {dv}");
                past.push((it.question, u_ref));
                values = v_ref;
                state = next;
            }
        }
    }

    #[test]
    fn prediction_ignores_current_answer() {
        let model = TgmnModel::<f64>::new(toy_keys(6, 3, 4, 5), toy_config(4, 3, Variant::Tgmn), 5).unwrap();
        let mut state = model.new_student();
        for (q, a) in [(0, 1), (3, 0), (5, 1), (2, 0)] {
            let (x, next) = model.step(&state, q, a, Mode::Eval).unwrap();
            let (y, _) = model.step(&state, q, 1 - a, Mode::Eval).unwrap();
            assert_eq!(x.prob, y.prob);
            state = next;
        }
    }

    #[test]
    fn batched_pass_matches_sequential_steps() {
        for variant in Variant::ALL {
            let mut model = TgmnModel::<f64>::new(toy_keys(6, 3, 4, 6), toy_config(4, 3, variant), 6).unwrap();
            let logs: Vec<StudentLog> = [5, 8, 1, 8, 3].iter().enumerate().map(|(i, &n)| toy_log(i as u64, n, 6, i as u64 + 10)).collect();
            let refs: Vec<&StudentLog> = logs.iter().collect();
            let batch = model.process_batch(&refs, None).unwrap();
            for (log, probs) in logs.iter().zip(&batch.probs) {
                let mut state = model.new_student();
                for (it, &p) in log.interactions.iter().zip(probs) {
                    let (out, next) = model.step(&state, it.question, it.answer, Mode::Eval).unwrap();
                    assert!((out.prob - p).abs() < 1e-10, "{variant}");
                    state = next;
                }
            }
            assert_eq!(batch.count, 25);
        }
    }

    #[test]
    fn base_variant_never_decays() {
        let mut model = TgmnModel::<f64>::new(toy_keys(6, 3, 4, 7), toy_config(4, 3, Variant::Base), 7).unwrap();
        let logs: Vec<StudentLog> = (0..3).map(|i| toy_log(i, 7, 6, i)).collect();
        let refs: Vec<&StudentLog> = logs.iter().collect();
        let before = crate::tgm::decay_invocations();
        model.process_batch(&refs, None).unwrap();
        let mut adam = Adam::new(1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        model.process_batch(&refs, Some(Training { adam: &mut adam, rng: &mut rng })).unwrap();
        assert_eq!(crate::tgm::decay_invocations(), before);
        model.config.variant = Variant::TgmnF;
        model.process_batch(&refs, None).unwrap();
        assert!(crate::tgm::decay_invocations() > before);
    }

    #[test]
    fn answer_blind_base_ignores_answers() {
        let config = ModelConfig {
            answer_blind_ablation: true,
            ..toy_config(4, 3, Variant::Base)
        };
        let mut model = TgmnModel::<f64>::new(toy_keys(6, 3, 4, 9), config, 9).unwrap();
        let log = toy_log(0, 7, 6, 9);
        let mut flipped = log.clone();
        for it in &mut flipped.interactions {
            it.answer = 1 - it.answer;
        }
        let a = model.process_batch(&[&log], None).unwrap();
        let b = model.process_batch(&[&flipped], None).unwrap();
        assert_eq!(a.probs, b.probs);
        model.config.answer_blind_ablation = false;
        let c = model.process_batch(&[&log], None).unwrap();
        let d = model.process_batch(&[&flipped], None).unwrap();
        assert_ne!(c.probs, d.probs);
    }

    #[test]
    fn training_step_reduces_loss_and_keeps_frozen_state() {
        let mut model = TgmnModel::<f64>::new(toy_keys(6, 3, 4, 8), toy_config(6, 3, Variant::Tgmn), 8).unwrap();
        let logs: Vec<StudentLog> = (0..6).map(|i| toy_log(i, 9, 6, 100 + i)).collect();
        let refs: Vec<&StudentLog> = logs.iter().collect();
        let frozen = model.frozen_checksum();
        let first = model.process_batch(&refs, None).unwrap();
        let mut adam = Adam::new(1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            model.process_batch(&refs, Some(Training { adam: &mut adam, rng: &mut rng })).unwrap();
        }
        let last = model.process_batch(&refs, None).unwrap();
        assert!(last.loss_sum < first.loss_sum);
        assert_eq!(model.frozen_checksum(), frozen);
    }

    #[test]
    fn full_bptt_trains_over_whole_logs() {
        let mut cfg = toy_config(4, 3, Variant::Tgmn);
        cfg.bptt = Bptt::Full;
        let mut model = TgmnModel::<f64>::new(toy_keys(6, 3, 4, 9), cfg, 9).unwrap();
        let logs: Vec<StudentLog> = (0..4).map(|i| toy_log(i, 7, 6, 200 + i)).collect();
        let refs: Vec<&StudentLog> = logs.iter().collect();
        let mut adam = Adam::new(1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = model.process_batch(&refs, Some(Training { adam: &mut adam, rng: &mut rng })).unwrap();
        assert_eq!(r.count, 28);
        assert!(r.loss_sum.is_finite());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut model = TgmnModel::<f32>::new(toy_keys(6, 3, 4, 10), toy_config(4, 3, Variant::Tgmn), 10).unwrap();
        let logs: Vec<StudentLog> = (0..3).map(|i| toy_log(i, 7, 6, i)).collect();
        let refs: Vec<&StudentLog> = logs.iter().collect();
        let mut adam = Adam::new(1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        model.process_batch(&refs, Some(Training { adam: &mut adam, rng: &mut rng })).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save_checkpoint(&path).unwrap();
        let mut back = TgmnModel::<f32>::load_checkpoint(&path).unwrap();
        let a = model.process_batch(&refs, None).unwrap();
        let b = back.process_batch(&refs, None).unwrap();
        assert_eq!(a, b);

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() * 2 / 3]).unwrap();
        assert!(matches!(TgmnModel::<f32>::load_checkpoint(&path), Err(TgmnError::Format { .. })));
        fs::write(&path, text.replacen("TGMN-CHECKPOINT 1", "TGMN-CHECKPOINT 7", 1)).unwrap();
        match TgmnModel::<f32>::load_checkpoint(&path) {
            Err(TgmnError::Version { expected: 1, found: 7 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
        assert!(TgmnModel::<f64>::load_checkpoint(&path).is_err());
    }

    #[test]
    fn dataset_with_other_kc_count_is_rejected() {
        let model = TgmnModel::<f32>::new(toy_keys(50, 5, 4, 11), toy_config(4, 3, Variant::Tgmn), 11).unwrap();
        let ds = crate::datasets::generate_synthetic(3, 50, 6, 1).unwrap();
        match model.check_dataset(&ds) {
            Err(TgmnError::Shape { field, .. }) => assert_eq!(field, "num_kcs"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model = TgmnModel::<f64>::new(toy_keys(6, 4, 8, 12), toy_config(8, 3, Variant::Tgmn), 12).unwrap();
        // Zero biases make some gradients vanish to the noise floor of the
        // differences; random weights keep every group well-conditioned.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let (r, c) = model.params.get(id).dim();
            *model.params.get_mut(id) = gaussian(r, c, 0.5, &mut rng);
        }
        let logs = [toy_log(0, 3, 6, 1), toy_log(1, 2, 6, 2)];
        let refs: Vec<&StudentLog> = logs.iter().collect();
        for (name, err) in gradient_check(&model, &refs, 1e-6) {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("TGMN-X".parse::<Variant>().is_err());
    }
}
